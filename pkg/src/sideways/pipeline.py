"""Step-indexed schedulers for blocking backprop and the Sideways pipeline.

One computation step lets every module do one unit of forward and/or
backward work. Module ``i`` (1-based in traces) reads only what its
neighbours wrote during the previous step, so the modules inside a step
are independent and may run in any order or in parallel.

Both training modes run on the same step machinery; they differ only in
when frames are injected into module 1:

* ``sideways`` -- a new frame every step, so activations and gradients from
  different frames meet inside the pipeline (pseudo-gradients);
* ``bp`` -- one frame per update cycle of ``2D - 1`` steps, so the pipeline
  holds a single frame at a time and gradients are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .network import Network


class NoUpdate:
    """Marker for a module that saw no gradient during an episode."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NO_UPDATE"

    def __bool__(self):
        return False


NO_UPDATE = NoUpdate()


class PipelineInvariantError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def cycle_length(depth: int) -> int:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return 2 * depth - 1


class Message(NamedTuple):
    value: np.ndarray
    origin: int  # 1-based frame index the information was spawned by


# -- episodes ---------------------------------------------------------------------


@dataclass
class Episode:
    """A clip (or a batch of clips stepped in lockstep) plus its targets.

    ``frames`` has shape ``(K, N, H, W, C)``. Classification episodes carry one
    label per clip, replicated over time; autoencoding targets are the frames.
    """

    frames: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ValueError(f"episode frames must be (K, N, H, W, C), got shape {self.frames.shape}")
        if len(self.frames) < 1:
            raise ValueError("episode needs at least one frame")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.frames.shape[1]:
                raise ValueError("one label per clip required")

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def batch(self):
        return self.frames.shape[1]

    def frame(self, origin):
        return self.frames[origin - 1]

    def target(self, origin):
        """Target paired with the output spawned by frame ``origin``.

        Labels are constant over a clip, so this equals the label at the step
        the loss fires. For autoencoding the target is the origin frame itself.
        """
        if self.labels is not None:
            return self.labels
        return self.frames[origin - 1]

    @classmethod
    def from_clips(cls, clips, task="classification", dtype=np.float32):
        frames = np.stack([np.asarray(c.frames, dtype=dtype) for c in clips], axis=1)
        labels = np.array([c.label for c in clips]) if task == "classification" else None
        return cls(frames, labels)

    @classmethod
    def from_array(cls, frames, labels=None):
        frames = np.asarray(frames)
        if frames.ndim == 4:
            frames = frames[:, None]
        if labels is not None:
            labels = np.atleast_1d(labels)
        return cls(frames, labels)

    def astype(self, dtype):
        return Episode(self.frames.astype(dtype, copy=False), self.labels)


# -- traces -------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    module: int  # 1-based
    fwd_origin: int | None
    bwd_origin: int | None
    masked: bool

    def to_json(self):
        return json.dumps({"step": self.step, "module": self.module, "fwd_origin": self.fwd_origin,
                           "bwd_origin": self.bwd_origin, "masked": self.masked})


@dataclass
class LossEvent:
    step: int
    origin: int
    loss: float


@dataclass
class StepTrace:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, record: StepRecord):
        self.records.append(record)

    @property
    def num_steps(self):
        return self.records[-1].step if self.records else 0

    def at(self, step, module):
        for r in self.records:
            if r.step == step and r.module == module:
                return r
        raise KeyError((step, module))

    def active_modules(self, step):
        return [r.module for r in self.records
                if r.step == step and (r.fwd_origin is not None or r.bwd_origin is not None)]

    def to_jsonl(self):
        return "".join(r.to_json() + "\n" for r in self.records)

    def write_jsonl(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    def utilization_csv(self):
        lines = ["step,module,busy"]
        for r in self.records:
            busy = int(r.fwd_origin is not None or r.bwd_origin is not None)
            lines.append(f"{r.step},{r.module},{busy}")
        return "\n".join(lines) + "\n"


def read_trace_jsonl(path):
    trace = StepTrace()
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            trace.append(StepRecord(d["step"], d["module"], d["fwd_origin"], d["bwd_origin"], d["masked"]))
    return trace


# -- injection schedules ------------------------------------------------------------


def sideways_injector(num_frames):
    """Frame ``t`` enters module 1 at step ``t``; module 1 idles afterwards."""
    return lambda t: t if 1 <= t <= num_frames else None


def blocking_injector(num_frames, depth):
    """One frame per update cycle: the next frame waits until the previous cycle ends."""
    period = cycle_length(depth)

    def inject(t):
        j, r = divmod(t - 1, period)
        return j + 1 if r == 0 and j < num_frames else None

    return inject


def realtime_blocking_injector(num_frames, depth):
    """Frame ``t`` arrives at step ``t``; a blocked learner only accepts it when idle."""
    period = cycle_length(depth)
    return lambda t: t if 1 <= t <= num_frames and (t - 1) % period == 0 else None


def episode_steps(mode, num_frames, depth, drain=True):
    if mode == "sideways":
        return num_frames + (2 * (depth - 1) if drain else 0)
    if mode == "bp":
        return num_frames * cycle_length(depth)
    raise ValueError(f"unknown mode {mode!r}")


def make_injector(mode, num_frames, depth):
    if mode == "sideways":
        return sideways_injector(num_frames)
    if mode == "bp":
        return blocking_injector(num_frames, depth)
    raise ValueError(f"unknown mode {mode!r}")


# -- the per-module work unit ----------------------------------------------------------


@dataclass
class ModuleOutcome:
    fwd_out: Message | None
    bwd_out: Message | None
    grads: list | None
    record: StepRecord
    loss: LossEvent | None = None
    output: Message | None = None  # top module only: prediction and its origin
    work_units: int = 0


def module_step(net: Network, index: int, t: int, fwd_in: Message | None, bwd_in: Message | None,
                episode: Episode) -> ModuleOutcome:
    """One computation step of module ``index`` (0-based).

    Forward first: the incoming activation overwrites the single-slot cache.
    The top module then evaluates the loss on its fresh output (zero time).
    Backward pairs the upstream pseudo-gradient with the *current* cache,
    whatever frame it came from. Without an upstream message the module is
    masked and does no backward work.
    """
    module = net.modules[index]
    top = index == net.depth - 1
    fwd_out = bwd_out = grads = loss_event = output = None
    units = 0
    if fwd_in is not None:
        h = module.forward(fwd_in.value, fwd_in.origin)
        units += 1
        if top:
            output = Message(h, fwd_in.origin)
            loss, g = net.loss(h, episode.target(fwd_in.origin))
            loss_event = LossEvent(t, fwd_in.origin, loss)
            bwd_in = Message(g, fwd_in.origin)
        else:
            fwd_out = Message(h, fwd_in.origin)
    if bwd_in is not None:
        if module.input_cache is None:
            raise PipelineInvariantError(
                f"step {t}: module {index + 1} got a gradient from frame {bwd_in.origin} with an empty cache")
        grads, gx = module.backward(bwd_in.value, need_input_grad=index > 0)
        units += 1
        if index > 0:
            bwd_out = Message(gx, bwd_in.origin)
    record = StepRecord(t, index + 1, fwd_in.origin if fwd_in is not None else None,
                        bwd_in.origin if bwd_in is not None else None, bwd_in is None)
    return ModuleOutcome(fwd_out, bwd_out, grads, record, loss_event, output, units)


# -- pipeline state ----------------------------------------------------------------------


@dataclass
class PipelineState:
    depth: int
    injector: Callable[[int], int | None]
    step: int = 0
    fwd_inbox: list = field(default_factory=list)
    bwd_inbox: list = field(default_factory=list)
    grad_sum: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    mask_history: list = field(default_factory=list)
    trace: StepTrace = field(default_factory=StepTrace)

    def __post_init__(self):
        if not self.fwd_inbox:
            self._clear()

    def _clear(self):
        d = self.depth
        self.step = 0
        self.fwd_inbox = [None] * d
        self.bwd_inbox = [None] * d
        self.grad_sum = [None] * d
        self.gamma = [0] * d
        self.mask_history = []
        self.trace = StepTrace()

    @classmethod
    def start(cls, net: Network, episode: Episode, mode="sideways"):
        net.clear_caches()
        return cls(net.depth, make_injector(mode, episode.length, net.depth))

    def inputs_for(self, index, t, episode):
        if index == 0:
            origin = self.injector(t)
            return (Message(episode.frame(origin), origin) if origin is not None else None), self.bwd_inbox[0]
        return self.fwd_inbox[index], self.bwd_inbox[index]

    def accumulate(self, index, grads):
        """Masked running sum of per-step parameter pseudo-gradients."""
        if grads is None:
            return
        if self.grad_sum[index] is None:
            self.grad_sum[index] = [g.copy() for g in grads]
        else:
            for acc, g in zip(self.grad_sum[index], grads):
                acc += g
        self.gamma[index] += 1

    def record_step(self, t, outcomes):
        self.mask_history.append([0 if o.grads is None else 1 for o in outcomes])
        for o in outcomes:
            self.trace.append(o.record)
            if o.loss is not None:
                self.trace.losses.append(o.loss)
        self.step = t

    def commit(self, t, outcomes):
        """Record a finished step and route outputs into next-step inboxes."""
        d = self.depth
        self.fwd_inbox = [None] + [outcomes[i].fwd_out for i in range(d - 1)]
        self.bwd_inbox = [outcomes[i + 1].bwd_out for i in range(d - 1)] + [None]
        self.record_step(t, outcomes)


def sideways_step(state: PipelineState, net: Network, episode: Episode, on_module=None):
    """Advance every module by one computation step (sequential reference engine)."""
    t = state.step + 1
    outcomes = []
    for i in range(net.depth):
        fwd_in, bwd_in = state.inputs_for(i, t, episode)
        try:
            o = module_step(net, i, t, fwd_in, bwd_in, episode)
        except PipelineInvariantError as err:
            err.trace = state.trace
            raise
        state.accumulate(i, o.grads)
        if on_module is not None:
            on_module(i, t, o)
        outcomes.append(o)
    state.commit(t, outcomes)
    return outcomes


def finish_episode(state: PipelineState):
    """Masked average ``sum_t gamma_i^t g_i^t / gamma_i`` per module, or NO_UPDATE."""
    out = []
    for s, n in zip(state.grad_sum, state.gamma):
        if n == 0:
            out.append(NO_UPDATE)
        else:
            out.append([g / n for g in s])
    return out


def restart(state: PipelineState, net: Network | None = None):
    """Zero all in-flight activations, pseudo-gradients, accumulators and traces."""
    state._clear()
    if net is not None:
        net.clear_caches()
    return state


def run_episode(net: Network, episode: Episode, mode="sideways", drain=True, on_module=None, state=None):
    """Run a full episode on the sequential engine and return the final state."""
    if state is None:
        state = PipelineState.start(net, episode, mode)
    for _ in range(episode_steps(mode, episode.length, net.depth, drain)):
        sideways_step(state, net, episode, on_module)
    return state


def sideways_episode(net: Network, episode: Episode, drain=True):
    state = run_episode(net, episode, "sideways", drain)
    return finish_episode(state), state.trace


def bp_episode(net: Network, episode: Episode):
    """Blocking backprop: each frame is carried up and back down before the next one enters.

    Returns the frame-averaged exact gradients and the step trace.
    """
    state = run_episode(net, episode, "bp")
    return finish_episode(state), state.trace


def mean_loss(trace: StepTrace):
    return float(np.mean([e.loss for e in trace.losses])) if trace.losses else float("nan")


# -- real-time autoencoding ------------------------------------------------------------------


def _online_updater(net, optimizer, lr):
    """Per-step, per-module update with an episode of one frame (L = 1)."""

    def on_module(i, t, o):
        if optimizer is not None and o.grads is not None:
            optimizer.apply_update(i, net.modules[i].params, o.grads, lr)

    return on_module


def _run_stream(net, stream, injector, num_steps, optimizer=None, lr=None):
    episode = Episode.from_array(np.asarray(stream, dtype=net.dtype))
    net.clear_caches()
    state = PipelineState(net.depth, injector)
    produced = {}
    update = _online_updater(net, optimizer, lr)

    def on_module(i, t, o):
        if o.output is not None:
            produced[o.output.origin] = o.output.value
        update(i, t, o)

    for _ in range(num_steps):
        sideways_step(state, net, episode, on_module)
    return produced, state


def realtime_bp_autoencode(net: Network, stream, optimizer=None, lr=None):
    """Blocking backprop under a one-frame-per-step stream.

    After accepting a frame the learner is busy for ``2(D-1)`` further steps and
    drops whatever arrives meanwhile. Dropped frames get a copy of the last
    reconstruction produced. Returns ``(outputs, dropped, state)`` where
    outputs are aligned with the input frames.
    """
    stream = np.asarray(stream)
    n, d = len(stream), net.depth
    injector = realtime_blocking_injector(n, d)
    accepted = [t for t in range(1, n + 1) if injector(t) is not None]
    num_steps = accepted[-1] + cycle_length(d) - 1
    produced, state = _run_stream(net, stream, injector, num_steps, optimizer, lr)
    outputs = np.empty((n,) + produced[1].shape, dtype=produced[1].dtype)
    last = None
    for t in range(1, n + 1):
        if t in produced:
            last = produced[t]
        outputs[t - 1] = last
    dropped = sorted(set(range(1, n + 1)) - set(accepted))
    return outputs, dropped, state


def sideways_autoencode(net: Network, stream, optimizer=None, lr=None):
    """Pipelined autoencoding: every frame is encoded, decoded and (optionally) trained on.

    With an optimizer, each module updates right after every step in which it
    holds a pseudo-gradient. Returns ``(outputs, state)``.
    """
    stream = np.asarray(stream)
    n, d = len(stream), net.depth
    produced, state = _run_stream(net, stream, sideways_injector(n), n + 2 * (d - 1), optimizer, lr)
    return np.stack([produced[t] for t in range(1, n + 1)]), state


def dropped_frame_count(num_frames, depth):
    """Frames a blocking learner must drop from a stream of ``num_frames``."""
    return num_frames - math.ceil(num_frames / cycle_length(depth))


# -- gradient noise -------------------------------------------------------------------------


@dataclass
class NoiseReport:
    mean_relative: list  # per module, 1..D
    samples: list  # number of (step) samples per module
    per_step: dict = field(default_factory=dict)  # (module, step) -> relative noise


def measure_gradient_noise(net: Network, episode: Episode, drain=False):
    """Compare every per-step parameter pseudo-gradient to exact backprop.

    At step ``t`` module ``i`` holds upstream information from the loss that
    fired ``D - i`` steps earlier, i.e. from frame ``t + i - 2D + 1``. The noise
    is the difference to the exact gradient of that frame's loss.
    """
    d = net.depth
    exact_cache = {}

    def exact(origin):
        if origin not in exact_cache:
            _, _, grads = net.exact_gradients(episode.frame(origin), episode.target(origin))
            exact_cache[origin] = grads
        return exact_cache[origin]

    noise = {}

    def on_module(i, t, o):
        if o.grads is None:
            return
        ref = exact(o.record.bwd_origin)[i]
        num = math.sqrt(sum(float(np.sum((g - r) ** 2)) for g, r in zip(o.grads, ref)))
        den = math.sqrt(sum(float(np.sum(r * r)) for r in ref))
        noise[(i + 1, t)] = num / den if den > 0 else (0.0 if num == 0 else math.inf)

    run_episode(net, episode, "sideways", drain, on_module)
    means, counts = [], []
    for m in range(1, d + 1):
        vals = [v for (mod, _), v in noise.items() if mod == m]
        means.append(float(np.mean(vals)) if vals else float("nan"))
        counts.append(len(vals))
    return NoiseReport(means, counts, noise)
