"""Gradient oracles: central finite differences and an unrolled transcription of the Sideways rules.

The unrolled oracle keeps no pipeline state. For every (module, step) it
recomputes the needed activations from scratch with full forward passes,
builds explicit Jacobian matrices, and multiplies them out following the
recursive rules literally:

    param_grad[i, t]   = upstream[i, t] . J_theta H_i(h_{i-1} of frame c(i, t))
    upstream[i-1, t+1] = upstream[i, t] . J_h     H_i(h_{i-1} of frame c(i, t))

where ``c(i, t) = min(t - i + 1, K)`` is the most recent frame module ``i``
has seen and ``upstream[D, t]`` is the exact loss gradient of frame
``t - D + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import pipeline as P
from . import tensor as T
from .network import Network


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + eps
        fp = f()
        flat[j] = old - eps
        fm = f()
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error <= self.tolerance

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: error {self.error:.3e} (tol {self.tolerance:.0e})"


@dataclass
class CheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]

    def text(self):
        return "\n".join(r.line() for r in self.results)


# -- finite-difference checks ---------------------------------------------------------


def check_module_vjp(module, x, rng, eps=1e-5):
    """Errors of a module's parameter and input VJPs against finite differences of ``<out, u>``."""
    out, inter = module.apply(x)
    u = rng.standard_normal(out.shape)
    grads, gx = module.vjp(inter, u, need_input_grad=True)

    def f():
        return float(np.sum(module.apply(x)[0] * u))

    errs = [relative_error(gx, central_difference(f, x, eps))]
    for p, g in zip(module.params, grads):
        errs.append(relative_error(g, central_difference(f, p, eps)))
    return errs


def check_network_modules(net: Network, x, rng, tol=1e-6, eps=1e-5):
    report = CheckReport()
    h = x
    for i, m in enumerate(net.modules):
        errs = check_module_vjp(m, h, rng, eps)
        names = ["input"] + [f"param{j}" for j in range(len(m.params))]
        for name, e in zip(names, errs):
            report.results.append(CheckResult(f"module {i + 1} ({m.kind}) {name} vjp", e, tol))
        h, _ = m.apply(h)
    return report


def episode_loss(net: Network, episode: P.Episode):
    """Frame-averaged loss of a whole episode, recomputed from scratch."""
    return float(np.mean([net.loss(net.forward(episode.frame(t)), episode.target(t))[0]
                          for t in range(1, episode.length + 1)]))


def check_bp_episode(net: Network, episode: P.Episode, tol=1e-5, eps=1e-5):
    grads, _ = P.bp_episode(net, episode)
    report = CheckReport()
    for i, m in enumerate(net.modules):
        for j, p in enumerate(m.params):
            fd = central_difference(lambda: episode_loss(net, episode), p, eps)
            report.results.append(CheckResult(f"bp_episode module {i + 1} param{j}",
                                              relative_error(grads[i][j], fd), tol))
    return report


# -- unrolled Sideways oracle ---------------------------------------------------------------


def _jacobians(module, h):
    """Explicit ``J_h`` (out x in) and per-parameter ``J_theta`` matrices at input ``h``."""
    out, inter = module.apply(h)
    n_out = out.size
    jh = np.zeros((n_out, h.size))
    jp = [np.zeros((n_out, p.size)) for p in module.params]
    basis = np.zeros(n_out)
    for r in range(n_out):
        basis[:] = 0
        basis[r] = 1
        grads, gx = module.vjp(inter, basis.reshape(out.shape), need_input_grad=True)
        jh[r] = gx.ravel()
        for j, g in enumerate(grads):
            jp[j][r] = g.ravel()
    return jh, jp


def unrolled_sideways(net: Network, episode: P.Episode, drain=True):
    """Masked-average parameter pseudo-gradients, from the explicit recursion."""
    d, k = net.depth, episode.length
    steps = P.episode_steps("sideways", k, d, drain)

    @lru_cache(maxsize=None)
    def activation(level, origin):
        # h_level of frame `origin`; level 0 is the frame itself
        h = episode.frame(origin)
        for m in net.modules[:level]:
            h, _ = m.apply(h)
        return h

    @lru_cache(maxsize=None)
    def jac(i, origin):
        return _jacobians(net.modules[i - 1], activation(i - 1, origin))

    def cache_origin(i, t):
        o = t - i + 1
        return None if o < 1 else min(o, k)

    @lru_cache(maxsize=None)
    def upstream(i, t):
        # row vector arriving at module i (1-based) during step t, or None when masked
        if t < 1:
            return None
        if i == d:
            o = t - d + 1
            if not 1 <= o <= k:
                return None
            _, g = net.loss(activation(d, o), episode.target(o))
            return np.asarray(g, dtype=np.float64).ravel()
        above = upstream(i + 1, t - 1)
        if above is None:
            return None
        jh, _ = jac(i + 1, cache_origin(i + 1, t - 1))
        return above @ jh

    averages = []
    for i in range(1, d + 1):
        total, count = None, 0
        for t in range(1, steps + 1):
            u = upstream(i, t)
            if u is None:
                continue
            _, jp = jac(i, cache_origin(i, t))
            g = [u @ J for J in jp]
            total = g if total is None else [a + b for a, b in zip(total, g)]
            count += 1
        if count == 0:
            averages.append(P.NO_UPDATE)
        else:
            shapes = [p.shape for p in net.modules[i - 1].params]
            averages.append([(s / count).reshape(shape) for s, shape in zip(total, shapes)])
    return averages


def compare_gradients(a, b):
    """Largest relative error between two per-module gradient lists (NO_UPDATE must match)."""
    worst = 0.0
    for ga, gb in zip(a, b):
        if isinstance(ga, P.NoUpdate) or isinstance(gb, P.NoUpdate):
            if not (isinstance(ga, P.NoUpdate) and isinstance(gb, P.NoUpdate)):
                return math.inf
            continue
        for x, y in zip(ga, gb):
            worst = max(worst, relative_error(x, y))
    return worst


def tiny_network(depth, seed=0, precision="double", in_channels=1):
    """A network of ``depth`` modules small enough for explicit Jacobians."""
    from .network import build_simple_cnn

    channels = [2, 3, 2, 3, 2, 3, 2, 3][: depth - 1]
    if depth == 1:
        from .network import Dense, LayerModule, Network as Net, Pool, _init_params

        rng = np.random.default_rng(seed)
        layers = [Pool(), Dense(in_channels, 3, bias=True)]
        mod = LayerModule("head", layers, _init_params(layers, rng, T.dtype_of(precision)))
        mod.params[1] = rng.standard_normal(3).astype(mod.params[1].dtype) * 0.1
        return Net([mod], "classification", 3, in_channels, precision, {})
    net = build_simple_cnn(channels, num_classes=3, in_channels=in_channels, precision=precision, seed=seed)
    rng = np.random.default_rng(seed + 7)
    head = net.modules[-1]
    head.params[1] = rng.standard_normal(head.params[1].shape).astype(head.params[1].dtype) * 0.1
    return net


def run_oracle_suite(depths=(1, 2, 3), lengths=range(1, 7), seed=0, fault=None):
    """The full gradient-verification suite used by ``sideways gradcheck``.

    ``fault`` optionally receives the network before checking (fault injection).
    """
    rng = np.random.default_rng(seed)
    report = CheckReport()
    net = tiny_network(3, seed)
    if fault is not None:
        fault(net)
    x = rng.random((4, 4, 1))
    report.results += check_network_modules(net, x, rng).results
    ep = P.Episode.from_array(rng.random((3, 4, 4, 1)), labels=[1])
    report.results += check_bp_episode(net, ep).results
    for d in depths:
        for k in lengths:
            net = tiny_network(d, seed + d)
            if fault is not None:
                fault(net)
            ep = P.Episode.from_array(rng.random((k, 4, 4, 1)), labels=[int(rng.integers(3))])
            pipelined, _ = P.sideways_episode(net, ep)
            oracle = unrolled_sideways(net, ep)
            report.results.append(CheckResult(f"unrolled oracle D={d} K={k}",
                                              compare_gradients(pipelined, oracle), 1e-12))
    return report
