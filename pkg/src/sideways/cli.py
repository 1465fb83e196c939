"""Command-line entry point: ``sideways {train,gradcheck,trace,bench,realtime}``.

Exit codes: 0 ok, 1 check failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from . import pipeline as P
from .data import SpriteSceneSpec, generate_clip, generate_strided_clip
from .executor import bench_speedup, flops_for_ms, run_episode
from .gradcheck import run_oracle_suite
from .network import build_autoencoder, build_simple_cnn, save_checkpoint
from .optimizer import Optimizer, Schedule, sweep_grid
from .train import MetricsWriter, evaluate_classifier, evaluate_realtime, train_classifier, train_realtime

log = logging.getLogger("sideways")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2


# -- builders from a RunConfig -------------------------------------------------------------


def scene_spec(cfg: C.RunConfig):
    d = cfg.data
    return SpriteSceneSpec(n_sprites=d.n_sprites, shapes=tuple(d.shapes), delta=d.delta, size=d.sprite_size,
                           class_rule=d.class_rule, channels=cfg.network.in_channels, trail=d.trail,
                           trail_decay=d.trail_decay)


def make_clips(cfg: C.RunConfig, n, seed):
    spec, d = scene_spec(cfg), cfg.data
    return [generate_strided_clip(spec, d.clip_length, d.height, d.width, d.stride_k, seed=seed * 100_003 + j)
            for j in range(n)]


def make_network(cfg: C.RunConfig):
    n = cfg.network
    if cfg.task == "classification":
        return build_simple_cnn(n.channels, n.num_classes, n.in_channels, n.precision, n.seed)
    return build_autoencoder(n.channels, n.in_channels, n.precision, n.seed)


def make_optimizer(cfg: C.RunConfig):
    """Optimizer from config; autoencoding runs use ``realtime.lr`` as the base rate."""
    o = cfg.optimizer
    lr = cfg.realtime.lr if cfg.task == "autoencoding" else o.lr
    schedule = Schedule(o.warmup_epochs, tuple(o.decay_epochs), o.decay_factor)
    return Optimizer(o.rule, lr, o.clip_value, o.weight_decay, o.momentum, o.beta1, o.beta2, o.eps, schedule)


def make_executor(cfg: C.RunConfig):
    e = dataclasses.replace(cfg.executor)
    if e.mode == "parallel" and e.workers is None:
        e.workers = cfg.depth
    return e


def _prepare_output(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config.txt"), "w") as f:
        f.write(C.serialize(cfg))


# -- commands ---------------------------------------------------------------------------------


def cmd_train(cfg: C.RunConfig):
    """Train and write ``metrics.csv`` (flushed per iteration) plus ``checkpoint.bin``."""
    _prepare_output(cfg)
    net = make_network(cfg)
    opt = make_optimizer(cfg)
    metrics_path = os.path.join(cfg.output_dir, "metrics.csv")
    summary = {"mode": cfg.mode, "task": cfg.task}
    with MetricsWriter(metrics_path) as metrics:
        if cfg.task == "classification":
            clips = make_clips(cfg, cfg.data.n_clips, cfg.seed)
            iters_per_epoch = -(-len(clips) // cfg.batch_size)
            iterations = cfg.epochs * iters_per_epoch if cfg.epochs else cfg.iterations
            hist = train_classifier(net, clips, opt, iterations, cfg.mode, cfg.batch_size, make_executor(cfg),
                                    cfg.seed, cfg.data.flip, metrics,
                                    cfg.target_accuracy or None, log=_log_row)
            summary["iterations"] = len(hist.rows)
            summary["train_accuracy"] = evaluate_classifier(net, clips)
            if cfg.data.eval_clips:
                summary["eval_accuracy"] = evaluate_classifier(net, make_clips(cfg, cfg.data.eval_clips, cfg.seed + 1))
        else:
            streams = _streams(cfg, cfg.realtime.train_streams, cfg.seed)
            hist = train_realtime(net, streams, opt, cfg.mode, cfg.realtime.passes, metrics, log=_log_row)
            summary["iterations"] = len(hist.rows)
            summary["eval_mse"], _ = evaluate_realtime(net, _streams(cfg, cfg.realtime.eval_streams, cfg.seed + 1),
                                                       cfg.mode)
    save_checkpoint(os.path.join(cfg.output_dir, "checkpoint.bin"), net, {"summary": summary})
    _write_json(os.path.join(cfg.output_dir, "report.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _log_row(row):
    if row["iteration"] % 25 == 0:
        log.info("iter %d loss %.4f metric %.4f lr %.2e", row["iteration"], row["loss"], row["metric"], row["lr"])


def _streams(cfg, n, seed):
    spec, d, r = scene_spec(cfg), cfg.data, cfg.realtime
    return [generate_clip(spec, r.stream_length, d.height, d.width, seed=seed * 100_003 + j).frames
            for j in range(n)]


def cmd_gradcheck(cfg: C.RunConfig, sign_flip_module=None):
    """Finite-difference and unrolled-oracle checks on a tiny double-precision net."""
    fault = None
    if sign_flip_module is not None:
        def fault(net):
            if sign_flip_module <= net.depth:
                _flip_input_vjp(net.modules[sign_flip_module - 1])
    report = run_oracle_suite(seed=cfg.seed, fault=fault)
    print(report.text())
    failures = report.failures()
    if failures:
        print(f"{len(failures)} check(s) failed: " + "; ".join(r.name for r in failures))
        return EXIT_CHECK_FAILED
    print("all checks passed")
    return EXIT_OK


def _flip_input_vjp(module):
    """Fault injection: negate the input gradient of a module's first layer."""
    layer = module.layers[0]
    original = layer.vjp

    def flipped(x, params, g, need_input=True):
        pg, gx = original(x, params, g, need_input)
        return pg, -gx

    layer.vjp = flipped


def cmd_trace(cfg: C.RunConfig):
    """Write the step trace of one episode as JSON lines plus a utilization CSV."""
    _prepare_output(cfg)
    net = make_network(cfg)
    d = cfg.data
    clip = generate_clip(scene_spec(cfg), d.clip_length, d.height, d.width, seed=cfg.seed)
    episode = P.Episode.from_clips([clip], cfg.task, net.dtype)
    res = run_episode(make_executor(cfg), net, episode, cfg.mode)
    path = os.path.join(cfg.output_dir, "trace.jsonl")
    res.trace.write_jsonl(path)
    with open(os.path.join(cfg.output_dir, "utilization.csv"), "w") as f:
        f.write(res.trace.utilization_csv())
    print(json.dumps({"trace": path, "steps": res.trace.num_steps, "depth": net.depth,
                      "cycle_length": P.cycle_length(net.depth)}))
    return EXIT_OK


def cmd_bench(cfg: C.RunConfig):
    """Depth-parallel throughput of blocking BP vs Sideways; writes ``report.json``."""
    _prepare_output(cfg)
    net = make_network(cfg)
    e = make_executor(cfg)
    e.mode, e.workers = "parallel", net.depth
    if cfg.bench.load == "compute":
        e.artificial_flops_per_module = flops_for_ms(cfg.bench.unit_ms)
    else:
        e.artificial_latency_ms = cfg.bench.unit_ms
    report = bench_speedup(e, net, cfg.bench.n_steps, cfg.bench.repeats,
                           frame_shape=(cfg.data.height, cfg.data.width))
    with open(os.path.join(cfg.output_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    print(report.to_json())
    return EXIT_OK


def realtime_compare(cfg: C.RunConfig, log_fn=None):
    """Train BP and Sideways autoencoders under the real-time stream and evaluate both."""
    cfg = C.apply_overrides(cfg, {"task": "autoencoding"})
    train = _streams(cfg, cfg.realtime.train_streams, cfg.seed)
    held_out = _streams(cfg, cfg.realtime.eval_streams, cfg.seed + 1)
    out = {}
    for mode in ("bp", "sideways"):
        net = make_network(cfg)
        train_realtime(net, train, make_optimizer(cfg), mode, cfg.realtime.passes, log=log_fn)
        mse, dropped = evaluate_realtime(net, held_out, mode)
        out[f"{mode}_mse"] = mse
        if mode == "bp":
            out["dropped_frames"] = dropped
            out["dropped_frames_expected"] = len(held_out) * P.dropped_frame_count(cfg.realtime.stream_length,
                                                                                   net.depth)
    return out


def cmd_realtime_compare(cfg: C.RunConfig):
    _prepare_output(cfg)
    report = realtime_compare(cfg)
    _write_json(os.path.join(cfg.output_dir, "report.json"), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# -- argument parsing -----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sideways", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("train", "train a model"), ("gradcheck", "run the gradient oracle suite"),
                        ("trace", "emit a schedule trace"), ("bench", "measure depth-parallel speedup"),
                        ("realtime", "compare BP and Sideways on real-time autoencoding")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--preset", default=None, help="start from a named preset (full, desk)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--mode", choices=["bp", "sideways"])
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "gradcheck":
            s.add_argument("--inject-sign-flip", type=int, metavar="MODULE", help=argparse.SUPPRESS)
        if name == "train":
            s.add_argument("--sweep", action="store_true",
                           help="run the weight-decay x learning-rate grid into subdirectories")
    return p


def resolve_config(args):
    cfg = C.preset(args.preset) if args.preset else C.RunConfig()
    if args.config:
        with open(args.config) as f:
            text = f.read()
        file_cfg = C.parse(text)
        cfg = C.apply_overrides(cfg, {k: v for k, v in C.to_flat(file_cfg).items()
                                      if f"{k} =" in text or f"{k}=" in text})
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(item, "expected KEY=VALUE")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.mode:
        overrides["mode"] = args.mode
    if args.out:
        overrides["output_dir"] = args.out
    return C.apply_overrides(cfg, overrides).validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except (C.ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    np.random.seed(cfg.seed)
    if args.command == "train":
        if args.sweep:
            for point in sweep_grid():
                sub = C.apply_overrides(cfg, dict(point, output_dir=os.path.join(
                    cfg.output_dir, f"lr{point['optimizer.lr']:g}_wd{point['optimizer.weight_decay']:g}")))
                cmd_train(sub)
            return EXIT_OK
        return cmd_train(cfg)
    if args.command == "gradcheck":
        return cmd_gradcheck(cfg, args.inject_sign_flip)
    if args.command == "trace":
        return cmd_trace(cfg)
    if args.command == "bench":
        return cmd_bench(cfg)
    return cmd_realtime_compare(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
