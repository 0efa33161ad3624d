import numpy as np
import pytest
from numpy.testing import assert_allclose

from optim import Adam, AdamW, adam_step, adamw_step, clip_grad_norm, global_norm, init_state
from utils import ShapeError


def test_zero_gradient_applies_only_decay():
    params = {"w": np.array([1.0, -2.0, 4.0])}
    state = init_state(params, lr=0.1, weight_decay=0.01)
    new, state = adamw_step(params, {"w": np.zeros(3)}, state)
    assert_allclose(new["w"], params["w"] * (1.0 - 0.1 * 0.01))
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    params = {"w": np.array([0.5, 0.5])}
    state = init_state(params, lr=1e-3, weight_decay=0.0)
    new, _ = adamw_step(params, {"w": np.array([3.0, -0.2])}, state)
    assert_allclose(new["w"] - params["w"], [-1e-3, 1e-3], rtol=1e-4)


def test_inputs_untouched():
    params = {"w": np.ones(2)}
    state = init_state(params, lr=0.1)
    adamw_step(params, {"w": np.ones(2)}, state)
    assert_allclose(params["w"], 1.0)
    assert_allclose(state.m["w"], 0.0)


def test_gradient_shape_mismatch():
    params = {"w": np.ones((2, 2))}
    state = init_state(params)
    with pytest.raises(ShapeError):
        adamw_step(params, {"w": np.ones(4)}, state)


def test_missing_gradient():
    params = {"w": np.ones(2), "b": np.ones(1)}
    state = init_state(params)
    with pytest.raises(ShapeError):
        adamw_step(params, {"w": np.ones(2)}, state)


def test_nonpositive_learning_rate():
    with pytest.raises(ValueError):
        init_state({"w": np.ones(1)}, lr=0.0)


def test_adam_ignores_decay():
    params = {"w": np.array([2.0])}
    state = init_state(params, lr=0.1, weight_decay=0.5)
    new, _ = adam_step(params, {"w": np.zeros(1)}, state)
    assert_allclose(new["w"], [2.0])


class TestClipping:
    def test_global_norm(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)

    def test_rescales_above_threshold(self):
        grads, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        assert_allclose(grads["a"], [0.6, 0.8])

    def test_leaves_small_gradients(self):
        grads, _ = clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)
        assert_allclose(grads["a"], [0.3, 0.4])

    def test_disabled(self):
        grads, _ = clip_grad_norm({"a": np.array([30.0, 40.0])}, None)
        assert_allclose(grads["a"], [30.0, 40.0])


class TestStatefulOptimizers:
    def test_minimizes_quadratic(self):
        params = {"x": np.array([3.0, -2.0])}
        opt = Adam(params, lr=0.05, clip_norm=None)
        for _ in range(500):
            params = opt.step(params, {"x": 2.0 * params["x"]})
        assert np.all(np.abs(params["x"]) < 0.05)

    def test_records_grad_norm(self):
        params = {"x": np.zeros(2)}
        opt = AdamW(params, lr=0.1, clip_norm=1.0)
        opt.step(params, {"x": np.array([6.0, 8.0])})
        assert opt.last_grad_norm == pytest.approx(10.0)
        assert opt.state.step == 1
