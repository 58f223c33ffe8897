import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgrl.optim import (
    AdamState, ParamPack, PlateauState, adam_step, finite_diff_grad, plateau_step,
    relative_error, train_loop,
)


def test_zero_gradient_leaves_params():
    st_ = AdamState.zeros(3)
    x = np.array([1.0, -2.0, 3.0])
    new, _ = adam_step(st_, x, np.zeros(3))
    np.testing.assert_array_equal(new, x)


def test_first_step_moves_by_lr():
    st_ = AdamState.zeros(1, learning_rate=1e-3)
    assert st_.learning_rate == 1e-3
    new, st_ = adam_step(st_, np.array([0.0]), np.array([1.0]))
    assert new[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
    assert st_.step_count == 1


def test_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_adam_minimizes_square():
    x, trace = train_loop(lambda v, _e: (float(v @ v), 2 * v), np.array([5.0]), 5000, 1e-2)
    assert abs(x[0]) < 0.1
    assert trace[0] == 25.0


def test_plateau_hand_trace():
    s = PlateauState(current_lr=1e-3, patience=2, factor=0.5)
    plateau_step(s, 1.0)
    lrs = [plateau_step(s, 1.0).current_lr for _ in range(3)]
    assert lrs == [1e-3, 1e-3, 5e-4]


def test_plateau_improving_and_floor():
    s = PlateauState(current_lr=1e-3)
    for m in np.linspace(10, 0, 50):
        plateau_step(s, m)
    assert s.current_lr == 1e-3
    s = PlateauState(current_lr=1e-6, patience=0, min_lr=1e-6)
    for _ in range(5):
        plateau_step(s, 1.0)
    assert s.current_lr == 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
       st.integers(0, 5), st.floats(0.1, 0.9))
def test_plateau_never_raises_lr(metrics, patience, factor):
    s = PlateauState(current_lr=1e-2, patience=patience, factor=factor)
    prev = s.current_lr
    for m in metrics:
        plateau_step(s, m)
        assert s.current_lr <= prev
        prev = s.current_lr


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: float(x[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.2, np.ones(4)), np.zeros(4))
    x = np.random.default_rng(0).normal(size=6)
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v.sum()), x), np.ones(6), atol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, x, h=0)


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([2.0], [1.0]) == pytest.approx(0.5)


def test_param_pack_round_trip():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([7.0])}
    pack = ParamPack.of(arrays)
    vec = pack.flatten(arrays)
    assert pack.size == 7 and vec.shape == (7,)
    back = pack.unflatten(vec)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_bad_adam_hyperparameters():
    with pytest.raises(ValueError):
        AdamState.zeros(1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamState.zeros(1, epsilon=0.0)
    with pytest.raises(ValueError):
        PlateauState(factor=1.5)


def test_scheduler_feeds_learning_rate():
    sched = PlateauState(current_lr=0.1, patience=0, factor=0.5)
    # constant loss: every epoch after the first is a bad epoch
    train_loop(lambda v, _e: (1.0, np.zeros_like(v)), np.zeros(1), 4, 0.1, sched)
    assert math.isclose(sched.current_lr, 0.1 * 0.5 ** 3)
