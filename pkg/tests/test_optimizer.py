import numpy as np
import pytest

from sideways import pipeline as P
from sideways.optimizer import (
    NonFiniteGradientError,
    Optimizer,
    Schedule,
    clip_by_value,
    lr_at,
    sweep_grid,
)


def test_sgd_step():
    p = [np.array([1.0, 2.0])]
    Optimizer("sgd", lr=0.1, clip_value=None).apply_update(0, p, [np.array([1.0, -2.0])])
    np.testing.assert_allclose(p[0], [0.9, 2.2])


def test_momentum_accumulates():
    p = [np.array([0.0])]
    opt = Optimizer("momentum", lr=1.0, clip_value=None, momentum=0.5)
    opt.apply_update(0, p, [np.array([1.0])])
    opt.apply_update(0, p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(-(1.0 + 1.5))


def test_adam_two_steps_by_hand():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    opt = Optimizer("adam", lr=lr, clip_value=None, beta1=b1, beta2=b2, eps=eps)
    p = [np.array([0.5])]
    g1, g2 = 0.3, -0.1
    opt.apply_update(0, p, [np.array([g1])])
    # bias correction makes the first step exactly lr * sign(g)
    assert p[0][0] == pytest.approx(0.5 - lr * g1 / (abs(g1) + eps))
    opt.apply_update(0, p, [np.array([g2])])
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1**2 + g2**2)
    mhat, vhat = m / (1 - b1**2), v / (1 - b2**2)
    expected = 0.5 - lr * g1 / (abs(g1) + eps) - lr * mhat / (np.sqrt(vhat) + eps)
    assert p[0][0] == pytest.approx(expected, rel=1e-12)
    assert opt.step_count(0) == 2


def test_clipping_happens_before_the_rule():
    p = [np.array([0.0, 0.0])]
    Optimizer("sgd", lr=1.0, clip_value=1.0).apply_update(0, p, [np.array([5.0, -0.5])])
    np.testing.assert_allclose(p[0], [-1.0, 0.5])
    np.testing.assert_array_equal(clip_by_value(np.array([-3.0, 3.0]), 2.0), [-2.0, 2.0])


def test_decoupled_weight_decay_shrinks_geometrically():
    p = [np.array([1.0])]
    opt = Optimizer("sgd", lr=0.1, weight_decay=0.5, clip_value=None)
    for _ in range(4):
        opt.apply_update(0, p, [np.array([0.0])])
    assert p[0][0] == pytest.approx((1 - 0.05) ** 4)


def test_no_update_marker_is_skipped():
    p = [np.array([1.0])]
    opt = Optimizer("adam")
    opt.apply_update(3, p, P.NO_UPDATE)
    assert p[0][0] == 1.0 and opt.step_count(3) == 0


def test_non_finite_gradient_names_module():
    with pytest.raises(NonFiniteGradientError, match="module 4"):
        Optimizer().apply_update(4, [np.zeros(2)], [np.array([0.0, np.nan])])


@pytest.mark.parametrize("epoch,iteration,expected", [
    (0, 0, 0.0),
    (1, 0, 2e-5),
    (2, 5, 5e-5),  # 2.5 epochs into a 5-epoch warm-up
    (5, 0, 1e-4),
    (99, 9, 1e-4),
    (100, 0, 1e-5),
    (150, 3, 1e-5),
    (200, 0, 1e-6),
])
def test_lr_schedule(epoch, iteration, expected):
    sched = Schedule(warmup_epochs=5, decay_epochs=(100, 200), decay_factor=10, iterations_per_epoch=10)
    assert lr_at(1e-4, sched, epoch, iteration) == pytest.approx(expected, abs=1e-20)


def test_lr_without_schedule_is_constant():
    assert Optimizer(lr=3e-4).lr_for(500, 3) == 3e-4


def test_invalid_optimizer():
    with pytest.raises(ValueError):
        Optimizer("adagrad")
    with pytest.raises(ValueError):
        Optimizer(lr=0.0)


def test_sweep_grid_is_full_product():
    grid = sweep_grid()
    assert len(grid) == 8
    assert {g["optimizer.lr"] for g in grid} == {1e-4, 1e-5}
    assert {g["optimizer.weight_decay"] for g in grid} == {0.0, 1e-4, 1e-3, 1e-2}
