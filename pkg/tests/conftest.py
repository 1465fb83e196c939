import sys

import numpy as np
import pytest

from sideways import pipeline as P
from sideways.data import SpriteSceneSpec, generate_clip
from sideways.gradcheck import tiny_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return tiny_network(3, seed=0)


@pytest.fixture
def constant_clip():
    return generate_clip(SpriteSceneSpec(delta=0.0, size=3, channels=1), K=6, H=6, W=6, seed=3)


def random_episode(rng, k, size=4, channels=1, label=None, classes=3):
    label = int(rng.integers(classes)) if label is None else label
    return P.Episode.from_array(rng.random((k, size, size, channels)), labels=[label])


def token_schedule(depth, k, steps, inject):
    """Brute-force origin bookkeeping with no tensors: who holds which frame at each step."""
    fwd_prev = [None] * depth  # origin each module emitted forward last step
    bwd_prev = [None] * depth  # origin each module emitted backward last step
    rows = {}
    for t in range(1, steps + 1):
        fwd_now, bwd_now = [None] * depth, [None] * depth
        for i in range(depth):
            f = inject(t) if i == 0 else fwd_prev[i - 1]
            b = bwd_prev[i + 1] if i + 1 < depth else None
            if i == depth - 1 and f is not None:
                b = f  # loss fires on the fresh output
            rows[(t, i + 1)] = (f, b)
            fwd_now[i], bwd_now[i] = f, b
        fwd_prev, bwd_prev = fwd_now, bwd_now
    return rows


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.SUMMARY, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
