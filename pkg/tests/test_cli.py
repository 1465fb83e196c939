import csv
import json

import pytest

from sideways import cli
from sideways.network import load_checkpoint
from sideways.pipeline import read_trace_jsonl

TINY = ["--preset", "desk", "--set", "network.channels=2,2,2,2,2", "--set", "data.height=8",
        "--set", "data.width=8", "--set", "data.sprite_size=3", "--set", "data.clip_length=4",
        "--set", "data.n_clips=4", "--set", "data.eval_clips=2", "--set", "batch_size=2"]


def read_metrics(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_train_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", *TINY, "--set", "iterations=3", "--out", str(out)]) == 0
    rows = read_metrics(out / "metrics.csv")
    assert [r["iteration"] for r in rows] == ["0", "1", "2"]
    assert set(rows[0]) == {"iteration", "epoch", "mode", "loss", "grad_mean", "grad_l2", "metric", "lr"}
    net, extra = load_checkpoint(out / "checkpoint.bin")
    assert net.depth == 6 and extra["summary"]["iterations"] == 3
    assert (out / "config.txt").read_text().startswith("# sideways run config v1")


def test_train_is_deterministic(tmp_path):
    for name in ("a", "b"):
        cli.main(["train", *TINY, "--set", "iterations=4", "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_constant_clips_give_identical_loss_curves(tmp_path):
    losses = {}
    for mode in ("bp", "sideways"):
        out = tmp_path / mode
        cli.main(["train", *TINY, "--set", "data.delta=0", "--set", "iterations=5", "--set",
                  "optimizer.warmup_epochs=0", "--set", "network.precision=double", "--mode", mode, "--out", str(out)])
        losses[mode] = [float(r["loss"]) for r in read_metrics(out / "metrics.csv")]
    assert losses["bp"] == pytest.approx(losses["sideways"], rel=1e-6)


def test_train_autoencoding(tmp_path):
    out = tmp_path / "ae"
    code = cli.main(["train", *TINY, "--set", "task=autoencoding", "--set", "realtime.stream_length=12",
                     "--set", "realtime.train_streams=2", "--set", "realtime.eval_streams=1",
                     "--set", "realtime.passes=1", "--out", str(out)])
    assert code == 0
    assert len(read_metrics(out / "metrics.csv")) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--set", "mode=fast", "--out", str(tmp_path)]) == 2
    assert "mode" in capsys.readouterr().err
    assert cli.main(["train", "--set", "novalue"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_config_file_is_applied(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 7\ndata.delta = 0.25\n")
    args = cli.build_parser().parse_args(["train", "--preset", "desk", "--config", str(path)])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 7 and cfg.data.delta == 0.25
    assert cfg.data.height == 16  # preset values survive keys the file leaves out


def test_gradcheck_passes_and_fault_fails(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert "all checks passed" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--inject-sign-flip", "2"]) == 1
    assert "module 2 (conv) input vjp" in capsys.readouterr().out


def test_trace_single_frame_depth_five(tmp_path):
    out = tmp_path / "t"
    assert cli.main(["trace", *TINY, "--set", "network.channels=2,2,2,2", "--set", "data.clip_length=1",
                     "--out", str(out)]) == 0
    trace = read_trace_jsonl(out / "trace.jsonl")
    assert trace.num_steps == 9
    assert {r.module for r in trace.records} == {1, 2, 3, 4, 5}
    first = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
    assert set(first) == {"step", "module", "fwd_origin", "bwd_origin", "masked"}
    assert (out / "utilization.csv").read_text().startswith("step,module,busy")


def test_trace_bp_mode_blocks(tmp_path):
    out = tmp_path / "t"
    cli.main(["trace", *TINY, "--mode", "bp", "--out", str(out)])
    trace = read_trace_jsonl(out / "trace.jsonl")
    assert all(len(trace.active_modules(t)) <= 1 for t in range(1, trace.num_steps + 1))


def test_bench_report(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["bench", *TINY, "--set", "bench.load=latency", "--set", "bench.unit_ms=1",
                     "--set", "bench.n_steps=6", "--set", "bench.repeats=1", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["depth"] == 6 and report["cores"] >= 1 and report["per_module_ms"] > 0


def test_realtime_report(tmp_path):
    out = tmp_path / "r"
    code = cli.main(["realtime", *TINY, "--set", "realtime.stream_length=12", "--set", "realtime.train_streams=1",
                     "--set", "realtime.eval_streams=2", "--set", "realtime.passes=1", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["dropped_frames"] == report["dropped_frames_expected"] == 2 * (12 - 2)
    assert report["bp_mse"] > 0 and report["sideways_mse"] > 0
