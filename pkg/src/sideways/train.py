"""Training loops for the classification and real-time autoencoding tasks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as P
from .data import hflip
from .executor import ExecutorConfig, run_episode
from .network import Network
from .optimizer import Optimizer

METRIC_FIELDS = ("iteration", "epoch", "mode", "loss", "grad_mean", "grad_l2", "metric", "lr")


class MetricsWriter:
    """Appends one CSV row per iteration and flushes immediately."""

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=METRIC_FIELDS)
        self._w.writeheader()
        self._f.flush()

    def write(self, row):
        self._w.writerow({k: row[k] for k in METRIC_FIELDS})
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def gradient_stats(grads):
    flat = [g.ravel() for gs in grads if not isinstance(gs, P.NoUpdate) for g in gs]
    if not flat:
        return 0.0, 0.0
    v = np.concatenate(flat).astype(np.float64)
    return float(v.mean()), float(np.linalg.norm(v))


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.rows]

    def smoothed(self, name, window=25):
        v = np.asarray(self.column(name), dtype=float)
        if len(v) < window:
            return v
        return np.convolve(v, np.ones(window) / window, mode="valid")


def clip_predictions(outputs, batch):
    """Per-clip class from the logits summed over every loss event of the episode."""
    if not outputs:
        return np.full(batch, -1)
    return np.argmax(np.sum(outputs, axis=0), axis=-1)


def train_classifier(net: Network, clips, optimizer: Optimizer, iterations, mode="sideways", batch_size=8,
                     executor=None, seed=0, flip=False, metrics=None, target_accuracy=None,
                     accuracy_window=25, log=None):
    """Minibatch training over episodes; one optimizer update per episode.

    Stops early once the moving average of training accuracy over
    ``accuracy_window`` iterations reaches ``target_accuracy``.
    """
    executor = executor or ExecutorConfig()
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    iters_per_epoch = max(1, math.ceil(len(clips) / batch_size))
    if optimizer.schedule is not None:
        optimizer.schedule.iterations_per_epoch = iters_per_epoch
    accs = []
    for it in range(iterations):
        epoch, within = divmod(it, iters_per_epoch)
        idx = rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False)
        batch = [clips[j] for j in idx]
        if flip:
            batch = [hflip(c) if rng.random() < 0.5 else c for c in batch]
        episode = P.Episode.from_clips(batch, "classification", net.dtype)
        outputs = []

        def grab(i, t, o):
            if o.output is not None:
                outputs.append(o.output.value)

        res = run_episode(executor, net, episode, mode, on_module=grab)
        lr = optimizer.lr_for(epoch, within)
        for i, g in enumerate(res.grads):
            optimizer.apply_update(i, net.modules[i].params, g, lr)
        acc = float(np.mean(clip_predictions(outputs, episode.batch) == episode.labels))
        accs.append(acc)
        gmean, gl2 = gradient_stats(res.grads)
        row = {"iteration": it, "epoch": epoch, "mode": mode, "loss": P.mean_loss(res.trace),
               "grad_mean": gmean, "grad_l2": gl2, "metric": acc, "lr": lr}
        history.rows.append(row)
        if metrics is not None:
            metrics.write(row)
        if log is not None:
            log(row)
        if target_accuracy is not None and len(accs) >= accuracy_window:
            if np.mean(accs[-accuracy_window:]) >= target_accuracy:
                break
    return history


def evaluate_classifier(net: Network, clips):
    """Clean per-frame forward; the clip prediction sums logits over frames."""
    correct = 0
    for c in clips:
        logits = net.forward(np.asarray(c.frames, dtype=net.dtype))
        correct += int(np.argmax(logits.sum(axis=0)) == c.label)
    return correct / len(clips)


# -- real-time autoencoding ------------------------------------------------------------------


def per_frame_mse(outputs, stream):
    stream = np.asarray(stream, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64).reshape(stream.shape)
    return float(np.mean((outputs - stream) ** 2))


def train_realtime(net: Network, streams, optimizer: Optimizer, mode, passes=1, metrics=None, log=None):
    """Online training on one-frame-per-step streams.

    ``bp`` accepts a frame only when idle (dropping the rest); ``sideways``
    uses every frame. Each loss event updates immediately (episode of one frame).
    Returns the per-stream training MSE of the real-time outputs.
    """
    history = TrainHistory()
    it = 0
    for p in range(passes):
        for stream in streams:
            lr = optimizer.lr_for(p, 0)
            if mode == "bp":
                outputs, _, state = P.realtime_bp_autoencode(net, stream, optimizer, lr)
            else:
                outputs, state = P.sideways_autoencode(net, stream, optimizer, lr)
            row = {"iteration": it, "epoch": p, "mode": mode, "loss": P.mean_loss(state.trace),
                   "grad_mean": float("nan"), "grad_l2": float("nan"),
                   "metric": per_frame_mse(outputs, stream), "lr": lr}
            history.rows.append(row)
            if metrics is not None:
                metrics.write(row)
            if log is not None:
                log(row)
            it += 1
    return history


def evaluate_realtime(net: Network, streams, mode):
    """Held-out per-frame MSE with frozen weights under the real-time constraint."""
    errs, dropped = [], 0
    for stream in streams:
        if mode == "bp":
            outputs, drop, _ = P.realtime_bp_autoencode(net, stream)
            dropped += len(drop)
        else:
            outputs, _ = P.sideways_autoencode(net, stream)
        errs.append(per_frame_mse(outputs, stream))
    return float(np.mean(errs)), dropped
