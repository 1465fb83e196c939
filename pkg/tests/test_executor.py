import json

import numpy as np
import pytest

from sideways import pipeline as P
from sideways.executor import ExecutorConfig, ExecutorError, bench_speedup, burn, physical_cores, run_episode
from sideways.gradcheck import tiny_network

from conftest import random_episode


def assert_same_result(a, b):
    assert a.trace.records == b.trace.records
    assert [(e.step, e.origin, e.loss) for e in a.trace.losses] == [(e.step, e.origin, e.loss) for e in b.trace.losses]
    for ga, gb in zip(a.grads, b.grads):
        if ga is P.NO_UPDATE or gb is P.NO_UPDATE:
            assert ga is gb
            continue
        for x, y in zip(ga, gb):
            assert x.tobytes() == y.tobytes()


@pytest.mark.parametrize("mode", ["sideways", "bp"])
@pytest.mark.parametrize("depth", [1, 2, 4])
def test_parallel_is_bitwise_identical_to_simulator(mode, depth, rng):
    for _ in range(3):
        net = tiny_network(depth, seed=int(rng.integers(1000)))
        ep = random_episode(rng, int(rng.integers(1, 8)))
        sim = run_episode(ExecutorConfig(), net, ep, mode)
        par = run_episode(ExecutorConfig(mode="parallel", workers=depth), net, ep, mode)
        assert_same_result(sim, par)


def test_undrained_parallel_matches_simulator(rng):
    net = tiny_network(4, seed=0)
    ep = random_episode(rng, 3)
    sim = run_episode(ExecutorConfig(), net, ep, drain=False)
    par = run_episode(ExecutorConfig(mode="parallel"), net, ep, drain=False)
    assert_same_result(sim, par)
    assert sim.grads[0] is P.NO_UPDATE


def test_worker_failure_is_reported_with_module(rng):
    net = tiny_network(3, seed=0)

    def boom(i, t, o):
        if i == 1 and t == 3:
            raise RuntimeError("injected")

    with pytest.raises(ExecutorError, match="module 2") as info:
        run_episode(ExecutorConfig(mode="parallel"), net, random_episode(rng, 4), on_module=boom)
    assert info.value.trace is not None


@pytest.mark.parametrize("cfg", [ExecutorConfig(mode="gpu"), ExecutorConfig(workers=0),
                                 ExecutorConfig(mode="parallel", workers=2),
                                 ExecutorConfig(artificial_latency_ms=-1)])
def test_invalid_configs_rejected(cfg):
    with pytest.raises(ValueError):
        cfg.validate(depth=3)


def test_timing_has_one_entry_per_step(rng):
    net = tiny_network(2, seed=0)
    res = run_episode(ExecutorConfig(), net, random_episode(rng, 4))
    assert len(res.timing.step_s) == res.trace.num_steps == 6


def test_burn_latency_sleeps():
    import time

    t0 = time.perf_counter()
    burn(latency_ms=20)
    assert time.perf_counter() - t0 >= 0.019


def test_bench_depth_one_ratio_near_one():
    net = tiny_network(1, seed=0)
    report = bench_speedup(ExecutorConfig(mode="parallel", artificial_latency_ms=2.0), net, n_steps=10, repeats=2)
    assert report.ratio == pytest.approx(1.0, rel=0.25)


def test_bench_latency_load_shows_pipeline_overlap():
    # sleeping workers overlap even on one core, so this checks the pipelining itself
    net = tiny_network(3, seed=0)
    report = bench_speedup(ExecutorConfig(mode="parallel", artificial_latency_ms=5.0), net, n_steps=12, repeats=1)
    assert report.ratio > 1.8
    fields = json.loads(report.to_json())
    assert fields["cores"] == physical_cores()
    assert fields["per_module_ms"] >= 5.0
    assert fields["depth"] == 3
