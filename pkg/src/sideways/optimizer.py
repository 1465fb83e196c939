"""Update rules (SGD, momentum, Adam) with value clipping and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import NoUpdate


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class Schedule:
    """Linear warm-up from 0, then step decay by ``decay_factor`` at each decay epoch."""

    warmup_epochs: float = 5
    decay_epochs: tuple = (100, 200)
    decay_factor: float = 10.0
    iterations_per_epoch: int = 1


def lr_at(base_lr, schedule: Schedule, epoch, iteration=0):
    """Learning rate at ``iteration`` (within the epoch) of ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    progress = epoch + iteration / max(schedule.iterations_per_epoch, 1)
    if progress < schedule.warmup_epochs:
        return base_lr * progress / schedule.warmup_epochs
    drops = sum(1 for e in schedule.decay_epochs if progress >= e)
    return base_lr / schedule.decay_factor**drops


def clip_by_value(g, clip_value):
    if clip_value is None:
        return g
    return np.clip(g, -clip_value, clip_value)


@dataclass
class Optimizer:
    rule: str = "adam"  # "sgd" | "momentum" | "adam"
    lr: float = 1e-3
    clip_value: float | None = 1.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Schedule | None = None
    _state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.rule not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def lr_for(self, epoch=0, iteration=0):
        if self.schedule is None:
            return self.lr
        return lr_at(self.lr, self.schedule, epoch, iteration)

    def apply_update(self, key, params, grads, lr=None):
        """Update ``params`` in place from ``grads`` (or skip on a no-update marker).

        ``key`` identifies the parameter group (typically the module index) so
        moment buffers persist across calls.
        """
        if isinstance(grads, NoUpdate) or grads is None:
            return params
        lr = self.lr if lr is None else lr
        for j, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for module {key}, parameter {j}")
        st = self._state.setdefault(key, {"step": 0, "m": None, "v": None})
        st["step"] += 1
        if st["m"] is None:
            st["m"] = [np.zeros_like(p) for p in params]
            st["v"] = [np.zeros_like(p) for p in params]
        for j, (p, g) in enumerate(zip(params, grads)):
            g = clip_by_value(g, self.clip_value)
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            if self.rule == "sgd":
                p -= lr * g
            elif self.rule == "momentum":
                m = st["m"][j]
                m *= self.momentum
                m += g
                p -= lr * m
            else:
                m, v = st["m"][j], st["v"][j]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** st["step"])
                vhat = v / (1 - self.beta2 ** st["step"])
                p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
        return params

    def step_count(self, key):
        return self._state.get(key, {"step": 0})["step"]


# parameter sweep used in the experiments: weight decay x initial learning rate
SWEEP_WEIGHT_DECAY = (0.0, 1e-4, 1e-3, 1e-2)
SWEEP_LR = (1e-4, 1e-5)


def sweep_grid():
    return [{"optimizer.weight_decay": wd, "optimizer.lr": lr} for lr in SWEEP_LR for wd in SWEEP_WEIGHT_DECAY]
