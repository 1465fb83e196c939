"""Throughput of blocking backprop vs the Sideways pipeline with one thread per module.

Every forward or backward unit carries an artificial cost. With ``latency``
load the units sleep, as if waiting on an attached accelerator, so threads
overlap even on a single core; with ``compute`` load the gain needs as many
cores as modules.
"""
import sys

from sideways.executor import ExecutorConfig, bench_speedup, flops_for_ms, physical_cores
from sideways.network import build_simple_cnn

load = sys.argv[1] if len(sys.argv) > 1 else "latency"
net = build_simple_cnn((8, 8, 8, 8, 8), num_classes=4, seed=0)
cfg = ExecutorConfig(mode="parallel", workers=net.depth)
if load == "compute":
    cfg.artificial_flops_per_module = flops_for_ms(10)
else:
    cfg.artificial_latency_ms = 10
report = bench_speedup(cfg, net, n_steps=100, repeats=3)
print(f"{physical_cores()} core(s), {report.per_module_ms:.1f} ms per unit ({load})")
print(f"backprop {report.steps_per_sec_bp:.1f} frames/s, sideways {report.steps_per_sec_sideways:.1f} frames/s, "
      f"ratio {report.ratio:.2f}x")
