"""Engines that run pipeline steps: a sequential simulator and a depth-parallel runtime.

The parallel runtime gives each module its own worker thread. Neighbouring
workers exchange activations and gradients through capacity-one mailboxes
and all workers meet at a barrier after every computation step, so the
step semantics (and every floating-point operation) match the simulator.
Numpy releases the GIL inside its kernels, which is where the work is.
"""
from __future__ import annotations

import json
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pipeline as P
from .network import Network


class ExecutorError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ExecutorConfig:
    mode: str = "simulator"  # "simulator" | "parallel"
    workers: int | None = None  # must equal the depth in parallel mode
    artificial_flops_per_module: int = 0  # busy numpy work per forward/backward unit
    artificial_latency_ms: float = 0.0  # blocking wait per unit, emulating an attached device
    seed: int = 0
    timeout_s: float = 60.0

    def validate(self, depth=None):
        if self.mode not in ("simulator", "parallel"):
            raise ValueError(f"executor mode must be 'simulator' or 'parallel', got {self.mode!r}")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode == "parallel" and depth is not None and self.workers not in (None, depth):
            raise ValueError(f"parallel mode needs one worker per module ({depth}), got {self.workers}")
        if self.artificial_flops_per_module < 0 or self.artificial_latency_ms < 0:
            raise ValueError("artificial load must be non-negative")


# -- artificial load ---------------------------------------------------------------------

_BURN_N = 128
_BURN_FLOPS = 2 * _BURN_N**3
_burn_mats = {}


def _burn_matrix():
    tid = threading.get_ident()
    m = _burn_mats.get(tid)
    if m is None:
        m = _burn_mats[tid] = np.random.default_rng(0).standard_normal((_BURN_N, _BURN_N)) / _BURN_N
    return m


def burn(flops=0, latency_ms=0.0):
    """Spend roughly ``flops`` floating-point operations, then wait ``latency_ms``."""
    if flops > 0:
        a = _burn_matrix()
        b = a
        for _ in range(max(1, math.ceil(flops / _BURN_FLOPS))):
            b = a @ b
    if latency_ms > 0:
        time.sleep(latency_ms / 1000.0)


def flops_for_ms(ms, trials=5):
    """Calibrate how many artificial flops take ``ms`` milliseconds on one core."""
    reps = 20
    best = math.inf
    for _ in range(trials):
        t0 = time.perf_counter()
        burn(reps * _BURN_FLOPS)
        best = min(best, time.perf_counter() - t0)
    per_flop = best / (reps * _BURN_FLOPS)
    return int(ms / 1000.0 / per_flop)


# -- results ----------------------------------------------------------------------------------


@dataclass
class Timing:
    episode_s: float
    step_s: list = field(default_factory=list)

    @property
    def mean_step_s(self):
        return float(np.mean(self.step_s)) if self.step_s else 0.0


@dataclass
class EpisodeResult:
    grads: list
    trace: P.StepTrace
    timing: Timing
    state: P.PipelineState


# -- engines -----------------------------------------------------------------------------------


def _simulate(cfg, net, episode, state, num_steps, on_module):
    def hook(i, t, o):
        burn(cfg.artificial_flops_per_module * o.work_units, cfg.artificial_latency_ms * o.work_units)
        if on_module is not None:
            on_module(i, t, o)

    steps = []
    for _ in range(num_steps):
        t0 = time.perf_counter()
        P.sideways_step(state, net, episode, hook)
        steps.append(time.perf_counter() - t0)
    return steps


class Mailbox:
    """Single-slot channel between neighbouring workers; ``put`` blocks while full."""

    def __init__(self, abort: threading.Event, timeout_s: float):
        self._q = queue.Queue(maxsize=1)
        self._abort = abort
        self._deadline = timeout_s

    def put(self, msg):
        self._wait(lambda: self._q.put(msg, timeout=0.05))

    def get(self):
        return self._wait(lambda: self._q.get(timeout=0.05))

    def _wait(self, op):
        start = time.monotonic()
        while True:
            if self._abort.is_set():
                raise _Aborted()
            try:
                return op()
            except (queue.Full, queue.Empty):
                if time.monotonic() - start > self._deadline:
                    raise TimeoutError("mailbox wait exceeded timeout") from None


class _Aborted(Exception):
    pass


def _run_parallel(cfg, net, episode, state, num_steps, on_module):
    d = net.depth
    abort = threading.Event()
    fwd_box = [Mailbox(abort, cfg.timeout_s) for _ in range(d)]
    bwd_box = [Mailbox(abort, cfg.timeout_s) for _ in range(d)]
    for i in range(1, d):
        fwd_box[i].put(None)
    for i in range(d - 1):
        bwd_box[i].put(None)
    outcomes = [None] * d
    stamps = [time.perf_counter()]
    errors = []

    def end_of_step():
        # runs once per step, in whichever worker reaches the barrier last
        t = state.step + 1
        state.record_step(t, list(outcomes))
        stamps.append(time.perf_counter())

    barrier = threading.Barrier(d, action=end_of_step)

    def worker(i):
        try:
            for t in range(1, num_steps + 1):
                if i == 0:
                    origin = state.injector(t)
                    fwd_in = P.Message(episode.frame(origin), origin) if origin is not None else None
                else:
                    fwd_in = fwd_box[i].get()
                bwd_in = bwd_box[i].get() if i < d - 1 else None
                o = P.module_step(net, i, t, fwd_in, bwd_in, episode)
                burn(cfg.artificial_flops_per_module * o.work_units, cfg.artificial_latency_ms * o.work_units)
                state.accumulate(i, o.grads)
                if on_module is not None:
                    on_module(i, t, o)
                outcomes[i] = o
                if i < d - 1:
                    fwd_box[i + 1].put(o.fwd_out)
                if i > 0:
                    bwd_box[i - 1].put(o.bwd_out)
                barrier.wait(timeout=cfg.timeout_s)
        except (_Aborted, threading.BrokenBarrierError):
            pass
        except BaseException as err:  # noqa: BLE001 - reported to the caller below
            errors.append((i, err))
            abort.set()
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(i,), name=f"sideways-module-{i + 1}", daemon=True)
               for i in range(d)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        i, err = errors[0]
        raise ExecutorError(f"worker for module {i + 1} failed: {err!r}", state.trace) from err
    return list(np.diff(stamps))


def run_episode(cfg: ExecutorConfig, net: Network, episode: P.Episode, mode="sideways", drain=True,
                on_module=None, state=None) -> EpisodeResult:
    """Run one episode in ``bp`` or ``sideways`` mode on the configured engine."""
    cfg.validate(net.depth)
    if state is None:
        state = P.PipelineState.start(net, episode, mode)
    num_steps = P.episode_steps(mode, episode.length, net.depth, drain)
    t0 = time.perf_counter()
    if cfg.mode == "parallel":
        steps = _run_parallel(cfg, net, episode, state, num_steps, on_module)
    else:
        steps = _simulate(cfg, net, episode, state, num_steps, on_module)
    timing = Timing(time.perf_counter() - t0, steps)
    return EpisodeResult(P.finish_episode(state), state.trace, timing, state)


# -- speedup benchmark -----------------------------------------------------------------------------


@dataclass
class SpeedupReport:
    steps_per_sec_bp: float
    steps_per_sec_sideways: float
    ratio: float
    depth: int
    n_steps: int
    repeats: int
    cores: int
    per_module_ms: float
    artificial_flops_per_module: int
    artificial_latency_ms: float
    engine: str

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def physical_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _measure_unit_ms(cfg):
    t0 = time.perf_counter()
    for _ in range(3):
        burn(cfg.artificial_flops_per_module, cfg.artificial_latency_ms)
    return (time.perf_counter() - t0) / 3 * 1000


def bench_speedup(cfg: ExecutorConfig, net: Network, n_steps=100, repeats=3, frame_shape=(8, 8)):
    """Frames trained per second for blocking BP vs Sideways on random-number video.

    Each run feeds ``n_steps`` frames through the configured engine; the best of
    ``repeats`` runs is reported for each mode.
    """
    cfg.validate(net.depth)
    rng = np.random.default_rng(cfg.seed)
    h, w = frame_shape
    frames = rng.random((n_steps, 1, h, w, net.in_channels)).astype(net.dtype)
    labels = np.zeros(1, dtype=np.int64) if net.task == "classification" else None
    episode = P.Episode(frames, labels)
    rates = {}
    for mode in ("bp", "sideways"):
        best = 0.0
        for _ in range(repeats):
            res = run_episode(cfg, net, episode, mode)
            best = max(best, n_steps / res.timing.episode_s)
        rates[mode] = best
    return SpeedupReport(
        steps_per_sec_bp=rates["bp"],
        steps_per_sec_sideways=rates["sideways"],
        ratio=rates["sideways"] / rates["bp"],
        depth=net.depth,
        n_steps=n_steps,
        repeats=repeats,
        cores=physical_cores(),
        per_module_ms=_measure_unit_ms(cfg),
        artificial_flops_per_module=cfg.artificial_flops_per_module,
        artificial_latency_ms=cfg.artificial_latency_ms,
        engine=cfg.mode,
    )
