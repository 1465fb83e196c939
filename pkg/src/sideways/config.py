"""Flat ``section.key = value`` run configuration.

Defaults follow the experimental setup (Simple-CNN channels, 112x112 frames,
64-frame clips, batches of 8 clips, clipping at 1.0, five warm-up epochs,
decay at epochs 100 and 200). The ``desk`` preset shrinks everything so a
run finishes in minutes on a laptop CPU.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .executor import ExecutorConfig

FORMAT_HEADER = "# sideways run config v1"


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class NetworkConfig:
    channels: tuple = (32, 64, 64, 128, 256)
    num_classes: int = 4
    in_channels: int = 3
    precision: str = "single"
    seed: int = 0


@dataclass
class OptimizerConfig:
    rule: str = "adam"
    lr: float = 1e-4
    clip_value: float = 1.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: float = 5.0
    decay_epochs: tuple = (100, 200)
    decay_factor: float = 10.0


@dataclass
class DataConfig:
    n_clips: int = 64
    eval_clips: int = 32
    clip_length: int = 64
    height: int = 112
    width: int = 112
    delta: float = 1.0
    sprite_size: int = 16
    n_sprites: int = 1
    shapes: tuple = ("square",)
    class_rule: str = "direction"
    trail: int = 6
    trail_decay: float = 0.75
    stride_k: int = 0
    flip: bool = True


@dataclass
class RealtimeConfig:
    stream_length: int = 64
    train_streams: int = 32
    eval_streams: int = 8
    passes: int = 1
    lr: float = 1e-4


@dataclass
class BenchConfig:
    n_steps: int = 100
    repeats: int = 3
    unit_ms: float = 10.0
    load: str = "compute"  # "compute" | "latency"


@dataclass
class RunConfig:
    task: str = "classification"
    mode: str = "sideways"
    seed: int = 0
    iterations: int = 2000
    epochs: int = 0
    batch_size: int = 8
    output_dir: str = "runs/default"
    target_accuracy: float = 0.0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    realtime: RealtimeConfig = field(default_factory=RealtimeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self):
        choices = {
            "task": ("classification", "autoencoding"),
            "mode": ("bp", "sideways"),
            "network.precision": ("single", "double"),
            "optimizer.rule": ("sgd", "momentum", "adam"),
            "executor.mode": ("simulator", "parallel"),
            "data.class_rule": ("direction", "shape"),
            "bench.load": ("compute", "latency"),
        }
        flat = to_flat(self)
        for key, allowed in choices.items():
            if flat[key] not in allowed:
                raise ConfigError(key, f"must be one of {allowed}, got {flat[key]!r}")
        positive = ["iterations", "batch_size", "data.n_clips", "data.clip_length", "data.height",
                    "data.width", "data.sprite_size", "realtime.stream_length", "bench.n_steps",
                    "bench.repeats", "network.in_channels", "network.num_classes"]
        for key in positive:
            if flat[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if not self.network.channels:
            raise ConfigError("network.channels", "must be non-empty")
        if any(c < 1 for c in self.network.channels):
            raise ConfigError("network.channels", "channel counts must be >= 1")
        for key in ("optimizer.lr", "realtime.lr"):
            if flat[key] <= 0:
                raise ConfigError(key, "must be > 0")
        for key in ("data.delta", "optimizer.weight_decay", "data.stride_k", "data.trail", "epochs"):
            if flat[key] < 0:
                raise ConfigError(key, "must be >= 0")
        if self.data.sprite_size > min(self.data.height, self.data.width):
            raise ConfigError("data.sprite_size", "sprite does not fit the frame")
        if self.executor.workers is not None and self.executor.workers < 1:
            raise ConfigError("executor.workers", "must be >= 1")
        return self

    @property
    def depth(self):
        return len(self.network.channels) + 1


SECTIONS = ("network", "optimizer", "executor", "data", "realtime", "bench")


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text, proto, key):
    text = text.strip()
    try:
        if isinstance(proto, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(proto).__name__}") from None
    return text


def _parse_value(text, default, key):
    if isinstance(default, tuple):
        proto = default[0] if default else ""
        items = [s for s in text.split(",") if s.strip()]
        return tuple(_parse_scalar(s, proto, key) for s in items)
    if default is None:
        return None if text.strip().lower() == "none" else _parse_scalar(text, 0, key)
    return _parse_scalar(text, default, key)


def to_flat(cfg: RunConfig):
    flat = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for g in fields(v):
                flat[f"{f.name}.{g.name}"] = getattr(v, g.name)
        else:
            flat[f.name] = v
    return flat


def serialize(cfg: RunConfig) -> str:
    lines = [FORMAT_HEADER]
    for key, v in to_flat(cfg).items():
        lines.append(f"{key} = {_format(v)}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, pairs):
    """Apply ``{"section.key": value-or-text}`` overrides, returning a new config."""
    cfg = dataclasses.replace(cfg, **{s: dataclasses.replace(getattr(cfg, s)) for s in SECTIONS})
    defaults = to_flat(RunConfig())
    for key, value in pairs.items():
        key = key.strip()
        if key not in defaults:
            raise ConfigError(key, "unknown configuration key")
        if isinstance(value, str):
            value = _parse_value(value, defaults[key], key)
        section, _, name = key.rpartition(".")
        target = getattr(cfg, section) if section else cfg
        setattr(target, name, value)
    return cfg


def parse(text: str) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return apply_overrides(RunConfig(), pairs).validate()


def load(path) -> RunConfig:
    with open(path) as f:
        return parse(f.read())


DESK_PRESET = {
    "network.channels": (8, 16, 16, 32, 32),
    "data.height": 16,
    "data.width": 16,
    "data.clip_length": 16,
    "data.sprite_size": 5,
    "data.delta": 0.5,
    "data.flip": False,
    "optimizer.lr": 1e-3,
    "target_accuracy": 0.9,
    "realtime.stream_length": 32,
    "realtime.train_streams": 24,
    "realtime.eval_streams": 6,
    "realtime.passes": 4,
    "realtime.lr": 3e-4,
    "bench.n_steps": 100,
}

PRESETS = {"full": {}, "desk": DESK_PRESET}


def preset(name) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(RunConfig(), PRESETS[name]).validate()
