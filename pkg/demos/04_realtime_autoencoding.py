"""Reconstruct a live frame stream with a learner that cannot pause the stream.

Blocking backprop is busy for a whole update cycle after taking a frame, so
it drops the frames arriving meanwhile and repeats its last output. The
Sideways pipeline takes every frame. Both learn online from the stream.
"""
from sideways import cli
from sideways import config as C

for delta in (0.0, 1.0):
    cfg = C.apply_overrides(C.preset("desk"), {"data.delta": delta})
    r = cli.realtime_compare(cfg)
    print(f"delta={delta}: backprop mse {r['bp_mse']:.4f} ({r['dropped_frames']} frames dropped), "
          f"sideways mse {r['sideways_mse']:.4f}")
