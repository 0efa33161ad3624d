import numpy as np
import pytest
from numpy.testing import assert_allclose

from splines import SplineParams, identity_raw, raw_size, rq_spline_forward, rq_spline_inverse

K = 8
BOUND = 5.0


def _random_params(rng, n, scale=1.5):
    raw = rng.normal(scale=scale, size=(n, raw_size(K)))
    return SplineParams.from_raw(raw, BOUND)


def test_raw_size():
    assert raw_size(64) == 191
    assert identity_raw(64).shape == (191,)


def test_identity_parameters():
    params = SplineParams.from_raw(np.tile(identity_raw(K), (5, 1)), BOUND)
    x = np.linspace(-4.9, 4.9, 5)
    y, logdet = rq_spline_forward(x, params)
    assert_allclose(y.data, x, atol=1e-12)
    assert_allclose(logdet.data, 0.0, atol=1e-12)
    assert_allclose(params.derivatives.data, 1.0)


def test_knots_span_the_bound(rng):
    params = _random_params(rng, 3)
    assert_allclose(params.cum_widths.data[:, [0, -1]], [[-BOUND, BOUND]] * 3)
    assert_allclose(params.cum_heights.data[:, [0, -1]], [[-BOUND, BOUND]] * 3)
    assert np.all(params.widths.data >= 1e-3 * 2 * BOUND - 1e-12)
    assert np.all(params.derivatives.data > 0.0)


def test_identity_outside_bound(rng):
    params = _random_params(rng, 4)
    x = np.array([BOUND + 1.0, -BOUND - 1.0, 12.0, -7.5])
    y, logdet = rq_spline_forward(x, params)
    assert_allclose(y.data, x)
    assert_allclose(logdet.data, 0.0)
    back, inv_logdet = rq_spline_inverse(x, params)
    assert_allclose(back.data, x)
    assert_allclose(inv_logdet.data, 0.0)


def test_maps_bound_to_bound(rng):
    params = _random_params(rng, 2)
    y, _ = rq_spline_forward(np.array([-BOUND, BOUND]), params)
    assert_allclose(y.data, [-BOUND, BOUND], atol=1e-12)


def test_monotone():
    n = 500
    raw = np.random.default_rng(3).normal(scale=1.5, size=(1, raw_size(K)))
    params = SplineParams.from_raw(np.repeat(raw, n, axis=0), BOUND)
    y, _ = rq_spline_forward(np.linspace(-BOUND, BOUND, n), params)
    assert np.all(np.diff(y.data) > 0.0)


def test_inverse_undoes_forward(rng):
    n = 1000
    params = _random_params(rng, n)
    x = rng.uniform(-BOUND - 1.0, BOUND + 1.0, size=n)
    y, logdet = rq_spline_forward(x, params)
    back, inv_logdet = rq_spline_inverse(y.data, params)
    assert np.max(np.abs(back.data - x)) < 1e-8
    assert np.max(np.abs(logdet.data + inv_logdet.data)) < 1e-8


def test_log_derivative_matches_finite_differences(rng):
    n = 200
    params = _random_params(rng, n)
    x = rng.uniform(-BOUND + 0.01, BOUND - 0.01, size=n)
    eps = 1e-6
    y_plus, _ = rq_spline_forward(x + eps, params)
    y_minus, _ = rq_spline_forward(x - eps, params)
    numeric = np.log((y_plus.data - y_minus.data) / (2 * eps))
    _, logdet = rq_spline_forward(x, params)
    assert np.max(np.abs(numeric - logdet.data)) < 1e-4


def test_bad_raw_size():
    with pytest.raises(ValueError):
        SplineParams.from_raw(np.zeros((2, 10)), BOUND)
