"""Synthetic moving-sprite video, temporal striding, torus padding and the clip file format.

The per-step displacement ``delta`` is the smoothness knob: ``delta = 0`` gives
a constant clip, larger values make neighbouring frames less alike.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

DIRECTIONS = ("right", "left", "down", "up")
_VELOCITY = {0: (0.0, 1.0), 1: (0.0, -1.0), 2: (1.0, 0.0), 3: (-1.0, 0.0)}  # (dy, dx)


@dataclass
class Clip:
    frames: np.ndarray  # (K, H, W, C), values in [0, 1]
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError(f"clip frames must be (K>=1, H, W, C), got {self.frames.shape}")

    def __len__(self):
        return len(self.frames)


@dataclass
class SpriteSceneSpec:
    n_sprites: int = 1
    shapes: tuple = ("square",)
    delta: float = 1.0  # pixels per frame
    size: int = 4
    colors: tuple | None = None  # RGB per sprite; random when None
    class_rule: str = "direction"  # "direction" (4-way) | "shape"
    channels: int = 3
    trail: int = 0  # fading copies of past positions, makes motion visible in one frame
    trail_decay: float = 0.5
    avoid_bounce: bool = True

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.class_rule not in ("direction", "shape"):
            raise ValueError(f"unknown class rule {self.class_rule!r}")
        for s in self.shapes:
            if s not in ("square", "disc"):
                raise ValueError(f"unknown sprite shape {s!r}")

    @property
    def num_classes(self):
        return 4 if self.class_rule == "direction" else len(self.shapes)


class SpriteTooLargeError(ValueError):
    pass


def _coverage_1d(lo, size, n):
    """Fraction of each unit pixel in [0, n) covered by the interval [lo, lo + size)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, lo + size) - np.maximum(edges, lo), 0.0, 1.0)


def _render(shape, y, x, size, h, w):
    if shape == "square":
        return np.outer(_coverage_1d(y, size, h), _coverage_1d(x, size, w))
    r = size / 2.0
    cy, cx = y + r, x + r
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dist = np.hypot(yy - cy, xx - cx)
    return np.clip(r + 0.5 - dist, 0.0, 1.0)


def _bounce(p, lo, hi):
    """Reflect a coordinate into [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return lo
    q = np.mod(p - lo, 2 * span)
    return lo + (q if q <= span else 2 * span - q)


def generate_clip(spec: SpriteSceneSpec, K, H, W, seed=0) -> Clip:
    """Render ``K`` frames of sprites sliding ``spec.delta`` pixels per frame.

    With the direction rule every sprite moves the same way and the label is
    that direction; sprites reflect off the frame borders.
    """
    if spec.size > min(H, W):
        raise SpriteTooLargeError(f"sprite size {spec.size} does not fit a {H}x{W} frame")
    rng = np.random.default_rng(seed)
    direction = int(rng.integers(4))
    shape_ids = rng.integers(len(spec.shapes), size=spec.n_sprites)
    if spec.colors is not None:
        colors = np.array([spec.colors[j % len(spec.colors)] for j in range(spec.n_sprites)], dtype=float)
    else:
        colors = rng.uniform(0.4, 1.0, size=(spec.n_sprites, spec.channels))
    travel = spec.delta * (K - 1 + spec.trail)
    starts = []
    for _ in range(spec.n_sprites):
        y0, x0 = rng.uniform(0, H - spec.size), rng.uniform(0, W - spec.size)
        if spec.class_rule == "direction" and spec.avoid_bounce:
            dy, dx = _VELOCITY[direction]
            room = (H - spec.size) if dy else (W - spec.size)
            if travel <= room:
                # start far enough from the wall ahead to never touch it
                lo, hi = (0.0, room - travel) if (dy > 0 or dx > 0) else (travel, room)
                v = rng.uniform(lo, hi)
                y0, x0 = (v, x0) if dy else (y0, v)
        starts.append((y0, x0))
    dy, dx = _VELOCITY[direction]
    frames = np.zeros((K, H, W, spec.channels), dtype=np.float32)
    for k in range(K):
        for s, (y0, x0) in enumerate(starts):
            shape = spec.shapes[shape_ids[s]]
            layer = np.zeros((H, W))
            for lag in range(spec.trail, -1, -1):
                step = k - lag + spec.trail  # first rendered frame already has a full trail
                y = _bounce(y0 + dy * spec.delta * step, 0, H - spec.size)
                x = _bounce(x0 + dx * spec.delta * step, 0, W - spec.size)
                layer = np.maximum(layer, spec.trail_decay**lag * _render(shape, y, x, spec.size, H, W))
            frames[k] = np.maximum(frames[k], layer[..., None] * colors[s])
    label = direction if spec.class_rule == "direction" else int(shape_ids[0])
    meta = {"seed": seed, "delta": spec.delta, "fps_equivalent": 1.0, "class_rule": spec.class_rule}
    return Clip(np.clip(frames, 0.0, 1.0), label, meta)


def make_dataset(spec: SpriteSceneSpec, n_clips, K, H, W, seed=0):
    return [generate_clip(spec, K, H, W, seed=seed * 100_003 + j) for j in range(n_clips)]


def mean_interframe_difference(clip: Clip) -> float:
    if len(clip) < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(clip.frames, axis=0))))


def torus_pad(clip: Clip, target_K) -> Clip:
    """Repeat frames cyclically up to ``target_K``."""
    if target_K < 1:
        raise ValueError("target_K must be >= 1")
    idx = np.arange(target_K) % len(clip)
    return replace(clip, frames=clip.frames[idx])


def stride_subsample(clip: Clip, k, length=None) -> Clip:
    """Skip ``k`` frames between kept ones (stride ``k + 1``).

    With ``length`` the source is first torus-padded to ``(k + 1) * length``
    frames so the output always has ``length`` frames.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    stride = k + 1
    if length is None:
        length = len(clip) // stride if len(clip) >= stride else 1
    src = clip if len(clip) >= stride * length else torus_pad(clip, stride * length)
    return replace(clip, frames=src.frames[: stride * length : stride])


def generate_strided_clip(spec: SpriteSceneSpec, K, H, W, k, seed=0) -> Clip:
    """A ``K``-frame clip at stride ``k + 1``, from a ``(k + 1) K``-frame source."""
    return stride_subsample(generate_clip(spec, (k + 1) * K, H, W, seed), k, K)


def hflip(clip: Clip) -> Clip:
    """Mirror every frame horizontally; direction labels swap left and right."""
    label = clip.label
    if clip.meta.get("class_rule") == "direction" and label in (0, 1):
        label = 1 - label
    return replace(clip, frames=clip.frames[:, :, ::-1].copy(), label=label)


# -- clip files ---------------------------------------------------------------------------

CLIP_MAGIC = b"SWC1"
_HEADER = struct.Struct("<4sIIII")
MAX_PAYLOAD_BYTES = 1 << 34


class ClipFormatError(ValueError):
    pass


def clip_to_bytes(clip: Clip) -> bytes:
    k, h, w, c = clip.frames.shape
    body = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    return _HEADER.pack(CLIP_MAGIC, k, h, w, c) + body


def clip_from_bytes(blob: bytes) -> Clip:
    if len(blob) < _HEADER.size:
        raise ClipFormatError(f"truncated header: {len(blob)} bytes")
    magic, k, h, w, c = _HEADER.unpack_from(blob)
    if magic != CLIP_MAGIC:
        raise ClipFormatError(f"bad magic {magic!r}, expected {CLIP_MAGIC!r}")
    if min(k, h, w, c) == 0:
        raise ClipFormatError(f"empty dimension in header K={k} H={h} W={w} C={c}")
    frame_bytes = h * w * c * 4
    if k * frame_bytes > MAX_PAYLOAD_BYTES:
        raise ClipFormatError(f"shape overflow: K={k} H={h} W={w} C={c} exceeds {MAX_PAYLOAD_BYTES} bytes")
    payload = len(blob) - _HEADER.size
    if payload < k * frame_bytes:
        raise ClipFormatError(f"truncated payload at frame {payload // frame_bytes + 1}")
    if payload > k * frame_bytes:
        raise ClipFormatError(f"{payload - k * frame_bytes} trailing bytes after payload")
    frames = np.frombuffer(blob, "<f4", k * h * w * c, _HEADER.size).reshape(k, h, w, c)
    return Clip(frames.astype(np.float32))


def write_clip_file(path, clip: Clip):
    with open(path, "wb") as f:
        f.write(clip_to_bytes(clip))


def read_clip_file(path) -> Clip:
    with open(path, "rb") as f:
        return clip_from_bytes(f.read())
