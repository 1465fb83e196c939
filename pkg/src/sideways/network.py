"""Sideways modules and the two reference architectures.

A :class:`LayerModule` is one pipeline stage ``H_i(h, theta_i)``. It may hold
several primitive layers (conv + relu, or the whole decoder) which are
differentiated together with exact chained VJPs. Each module keeps exactly
one cached input activation; backward always uses whatever is cached.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class GradientWithoutActivationError(RuntimeError):
    pass


# -- primitive layers --------------------------------------------------------


class Conv:
    kind = "conv"

    def __init__(self, cin, cout, stride=1, padding="same", k=3):
        self.cin, self.cout, self.stride, self.padding, self.k = cin, cout, stride, padding, k

    def param_shapes(self):
        return [(self.k, self.k, self.cin, self.cout)]

    def fan_in(self):
        return self.k * self.k * self.cin

    def forward(self, x, params):
        return T.conv2d_forward(x, params[0], self.stride, self.padding)

    def vjp(self, x, params, g, need_input=True):
        gx, gk = T.conv2d_vjp(x, params[0], g, self.stride, self.padding)
        return [gk], gx

    def describe(self):
        return {"layer": "conv", "cin": self.cin, "cout": self.cout, "stride": self.stride,
                "padding": self.padding, "k": self.k}


class Deconv(Conv):
    kind = "deconv"

    def forward(self, x, params):
        return T.deconv2d_forward(x, params[0], self.stride, self.padding)

    def vjp(self, x, params, g, need_input=True):
        gx, gk = T.deconv2d_vjp(x, params[0], g, self.stride, self.padding)
        return [gk], gx

    def describe(self):
        return dict(super().describe(), layer="deconv")


class ReLU:
    kind = "relu"

    def param_shapes(self):
        return []

    def forward(self, x, params):
        return T.relu_forward(x)

    def vjp(self, x, params, g, need_input=True):
        return [], T.relu_vjp(x, g)

    def describe(self):
        return {"layer": "relu"}


class Pool:
    kind = "pool"

    def param_shapes(self):
        return []

    def forward(self, x, params):
        return T.global_avg_pool_forward(x)

    def vjp(self, x, params, g, need_input=True):
        return [], T.global_avg_pool_vjp(x, g)

    def describe(self):
        return {"layer": "pool"}


class Dense:
    kind = "linear"

    def __init__(self, fin, fout, bias=False):
        self.fin, self.fout, self.bias = fin, fout, bias

    def param_shapes(self):
        return [(self.fin, self.fout)] + ([(self.fout,)] if self.bias else [])

    def fan_in(self):
        return self.fin

    def forward(self, x, params):
        return T.linear_forward(x, params[0], params[1] if self.bias else None)

    def vjp(self, x, params, g, need_input=True):
        gx, gw, gb = T.linear_vjp(x, params[0], g, params[1] if self.bias else None)
        return ([gw, gb] if self.bias else [gw]), gx

    def describe(self):
        return {"layer": "linear", "fin": self.fin, "fout": self.fout, "bias": self.bias}


def layer_from_description(d):
    kind = d["layer"]
    if kind == "conv":
        return Conv(d["cin"], d["cout"], d["stride"], d["padding"], d["k"])
    if kind == "deconv":
        return Deconv(d["cin"], d["cout"], d["stride"], d["padding"], d["k"])
    if kind == "relu":
        return ReLU()
    if kind == "pool":
        return Pool()
    if kind == "linear":
        return Dense(d["fin"], d["fout"], d["bias"])
    raise ValueError(f"unknown layer kind {kind!r}")


# -- modules -----------------------------------------------------------------


class LayerModule:
    """One Sideways stage: a short chain of primitive layers plus a one-slot cache."""

    def __init__(self, kind, layers, params):
        self.kind = kind
        self.layers = list(layers)
        self.params = list(params)
        self._slices = []
        pos = 0
        for layer in self.layers:
            n = len(layer.param_shapes())
            self._slices.append(slice(pos, pos + n))
            pos += n
        if pos != len(self.params):
            raise ValueError(f"{kind}: expected {pos} parameter arrays, got {len(self.params)}")
        self.input_cache = None
        self.cached_origin = None
        self._intermediates = None

    def apply(self, h):
        """Pure forward; returns the output and the per-layer inputs needed by :meth:`vjp`."""
        inputs = []
        for layer, sl in zip(self.layers, self._slices):
            inputs.append(h)
            h = layer.forward(h, self.params[sl])
        return h, inputs

    def vjp(self, inputs, upstream, need_input_grad=True):
        grads = [None] * len(self.params)
        g = upstream
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, sl = self.layers[idx], self._slices[idx]
            pg, g = layer.vjp(inputs[idx], self.params[sl], g, need_input_grad or idx > 0)
            grads[sl] = pg
        return grads, (g if need_input_grad else None)

    def forward(self, h, origin=None):
        out, inputs = self.apply(h)
        self.input_cache, self.cached_origin, self._intermediates = h, origin, inputs
        return out

    def backward(self, upstream, need_input_grad=True):
        """Parameter and input VJPs evaluated at the cached activation."""
        if self.input_cache is None:
            raise GradientWithoutActivationError(f"{self.kind} module received a gradient with an empty cache")
        return self.vjp(self._intermediates, upstream, need_input_grad)

    def clear_cache(self):
        self.input_cache = self.cached_origin = self._intermediates = None

    def describe(self):
        return {"kind": self.kind, "layers": [layer.describe() for layer in self.layers]}

    def __repr__(self):
        return f"LayerModule({self.kind}, {len(self.layers)} layers, {sum(p.size for p in self.params)} params)"


def _init_params(layers, rng, dtype):
    params = []
    for layer in layers:
        for j, shape in enumerate(layer.param_shapes()):
            if j == 0:
                limit = np.sqrt(6.0 / layer.fan_in())
                params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
            else:
                params.append(np.zeros(shape, dtype=dtype))
    return params


def make_module(kind, layers, rng, dtype):
    return LayerModule(kind, layers, _init_params(layers, rng, dtype))


@dataclass
class Network:
    """``M = H_D o ... o H_1`` split into ``D`` Sideways modules."""

    modules: list
    task: str  # "classification" | "autoencoding"
    num_classes: int | None = None
    in_channels: int = 3
    precision: str = "single"
    builder: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.modules:
            raise ValueError("a network needs at least one module")
        if self.task not in ("classification", "autoencoding"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def depth(self):
        return len(self.modules)

    @property
    def dtype(self):
        return T.dtype_of(self.precision)

    def forward(self, x):
        for m in self.modules:
            x, _ = m.apply(x)
        return x

    def loss(self, output, target):
        if self.task == "classification":
            return T.softmax_xent(output, target)
        return T.mse(output, target)

    def exact_gradients(self, x, target):
        """Classical backprop on one frame (or batch); returns ``(loss, output, grads per module)``."""
        inputs = []
        h = x
        for m in self.modules:
            h, inter = m.apply(h)
            inputs.append(inter)
        loss, g = self.loss(h, target)
        grads = [None] * self.depth
        for i in range(self.depth - 1, -1, -1):
            grads[i], g = self.modules[i].vjp(inputs[i], g, need_input_grad=i > 0)
        return loss, h, grads

    def get_params(self):
        return [[p.copy() for p in m.params] for m in self.modules]

    def set_params(self, params):
        for m, ps in zip(self.modules, params):
            m.params = [np.array(p, dtype=self.dtype, copy=True) for p in ps]

    def num_params(self):
        return sum(p.size for m in self.modules for p in m.params)

    def clear_caches(self):
        for m in self.modules:
            m.clear_cache()

    def config(self):
        return dict(self.builder, task=self.task, precision=self.precision)

    def clone(self):
        net = network_from_config(self.config())
        net.set_params(self.get_params())
        return net


def _strides(n):
    # stride 2 in every second layer starting from the first one
    return [2 if j % 2 == 0 else 1 for j in range(n)]


def build_simple_cnn(channels=(32, 64, 64, 128, 256), num_classes=10, in_channels=3,
                     precision="single", seed=0, padding="same"):
    """Conv(3x3)+ReLU modules with strides 2,1,2,1,2... then a pool + linear(+bias) head."""
    channels = list(channels)
    if not channels:
        raise ValueError("channels must be non-empty")
    rng = np.random.default_rng(seed)
    dtype = T.dtype_of(precision)
    modules = []
    cin = in_channels
    for cout, stride in zip(channels, _strides(len(channels))):
        modules.append(make_module("conv", [Conv(cin, cout, stride, padding), ReLU()], rng, dtype))
        cin = cout
    modules.append(make_module("head", [Pool(), Dense(cin, num_classes, bias=True)], rng, dtype))
    builder = {"builder": "simple_cnn", "channels": channels, "num_classes": num_classes,
               "in_channels": in_channels, "seed": seed, "padding": padding}
    return Network(modules, "classification", num_classes, in_channels, precision, builder)


def build_autoencoder(channels=(32, 64, 64, 128, 256), in_channels=3, precision="single", seed=0):
    """Pipelined conv encoder plus the whole deconv decoder as one composite module."""
    channels = list(channels)
    if not channels:
        raise ValueError("channels must be non-empty")
    rng = np.random.default_rng(seed)
    dtype = T.dtype_of(precision)
    strides = _strides(len(channels))
    modules = []
    cin = in_channels
    for cout, stride in zip(channels, strides):
        modules.append(make_module("conv", [Conv(cin, cout, stride), ReLU()], rng, dtype))
        cin = cout
    decoder = []
    outs = channels[-2::-1] + [in_channels]
    for cout, stride in zip(outs, strides[::-1]):
        decoder += [Deconv(cin, cout, stride), ReLU()]
        cin = cout
    decoder.pop()  # linear output layer
    modules.append(make_module("composite", decoder, rng, dtype))
    builder = {"builder": "autoencoder", "channels": channels, "in_channels": in_channels, "seed": seed}
    return Network(modules, "autoencoding", None, in_channels, precision, builder)


def network_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.pop("builder")
    precision = cfg.pop("precision", "single")
    cfg.pop("task", None)
    if kind == "simple_cnn":
        return build_simple_cnn(precision=precision, **cfg)
    if kind == "autoencoder":
        return build_autoencoder(precision=precision, **cfg)
    raise ValueError(f"unknown builder {kind!r}")


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SWCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: Network, extra=None):
    header = json.dumps({"network": net.config(), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for m in net.modules:
            for p in m.params:
                f.write(np.ascontiguousarray(p, dtype=p.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(blob[12 : 12 + hlen])
    net = network_from_config(meta["network"])
    pos = 12 + hlen
    dt = np.dtype(net.dtype).newbyteorder("<")
    for m in net.modules:
        for j, p in enumerate(m.params):
            nbytes = p.size * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated parameter payload")
            m.params[j] = np.frombuffer(blob, dt, p.size, pos).reshape(p.shape).astype(net.dtype)
            pos += nbytes
    return net, meta["extra"]
