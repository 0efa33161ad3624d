"""
Monotone rational-quadratic splines on [-B, B], identity outside.

A spline over K bins is described by the knot positions (cumulative widths
and heights, both running from -B to B) and the K + 1 knot derivatives, the
two boundary ones fixed to 1 so the map joins the identity tails smoothly.
All arrays carry a leading (..., d) shape: one spline per transformed value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import tensor as T
from tensor import Tensor, TensorLike

DEFAULT_BINS = 64
DEFAULT_BOUND = 5.0
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3


def raw_size(num_bins: int) -> int:
    """Raw conditioner outputs per transformed value: K widths, K heights, K-1 derivatives."""
    return 3 * num_bins - 1


def identity_raw(num_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Raw parameters that decode to the identity spline."""
    deriv = np.log(np.expm1(1.0 - MIN_DERIVATIVE))
    return np.concatenate([np.zeros(2 * num_bins), np.full(num_bins - 1, deriv)])


@dataclass(frozen=True)
class SplineParams:
    cum_widths: Tensor   # (..., K + 1), -B .. B
    cum_heights: Tensor  # (..., K + 1), -B .. B
    derivatives: Tensor  # (..., K + 1), ends fixed to 1
    bound: float

    @property
    def num_bins(self) -> int:
        return self.cum_widths.shape[-1] - 1

    @property
    def widths(self) -> Tensor:
        return self.cum_widths[..., 1:] - self.cum_widths[..., :-1]

    @property
    def heights(self) -> Tensor:
        return self.cum_heights[..., 1:] - self.cum_heights[..., :-1]

    @classmethod
    def from_raw(cls, raw: TensorLike, bound: float = DEFAULT_BOUND) -> "SplineParams":
        """
        Decode raw conditioner outputs (..., 3K - 1): softmax for widths and
        heights (floored at a minimum bin size, scaled to total 2B), softplus
        plus a floor for the interior derivatives.
        """
        raw = T.as_tensor(raw)
        K = (raw.shape[-1] + 1) // 3
        if raw.shape[-1] != raw_size(K) or K < 1:
            raise ValueError(f"raw spline parameters must have 3K-1 entries, got {raw.shape[-1]}")
        raw_w, raw_h, raw_d = T.split(raw, [K, K, K - 1], axis=-1)
        ones = np.ones(raw.shape[:-1] + (1,))
        return cls(
            cum_widths=_knots(raw_w, bound, MIN_BIN_WIDTH),
            cum_heights=_knots(raw_h, bound, MIN_BIN_HEIGHT),
            derivatives=T.concat([Tensor(ones), T.softplus(raw_d) + MIN_DERIVATIVE, Tensor(ones)], axis=-1),
            bound=float(bound),
        )


def _knots(raw: Tensor, bound: float, minimum: float) -> Tensor:
    K = raw.shape[-1]
    fractions = minimum + (1.0 - minimum * K) * T.softmax(raw, axis=-1)
    inner = 2.0 * bound * T.cumsum(fractions, axis=-1)[..., :-1] - bound
    edge = np.ones(raw.shape[:-1] + (1,))
    return T.concat([Tensor(-bound * edge), inner, Tensor(bound * edge)], axis=-1)


def _bin_index(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    idx = np.sum(x[..., None] >= knots[..., :-1], axis=-1) - 1
    return np.clip(idx, 0, knots.shape[-1] - 2)


def _gather(t: Tensor, idx: np.ndarray) -> Tensor:
    return T.reshape(T.take_along(t, idx[..., None], axis=-1), idx.shape)


def _bin_terms(params: SplineParams, idx: np.ndarray):
    xk = _gather(params.cum_widths, idx)
    wk = _gather(params.widths, idx)
    yk = _gather(params.cum_heights, idx)
    hk = _gather(params.heights, idx)
    dk = _gather(params.derivatives, idx)
    dk1 = _gather(params.derivatives, idx + 1)
    return xk, wk, yk, hk, dk, dk1, hk / wk


def _log_derivative(theta: Tensor, sk: Tensor, dk: Tensor, dk1: Tensor, denom: Tensor) -> Tensor:
    one_minus = 1.0 - theta
    numer = T.square(sk) * (dk1 * T.square(theta) + 2.0 * sk * theta * one_minus + dk * T.square(one_minus))
    return T.log(numer) - 2.0 * T.log(denom)


def rq_spline_forward(x: TensorLike, params: SplineParams):
    """x -> y with elementwise log|dy/dx|."""
    x = T.as_tensor(x)
    inside = np.abs(x.data) <= params.bound
    xs = T.where(inside, x, 0.0)
    idx = _bin_index(params.cum_widths.data, xs.data)
    xk, wk, yk, hk, dk, dk1, sk = _bin_terms(params, idx)

    theta = (xs - xk) / wk
    tt = theta * (1.0 - theta)
    denom = sk + (dk1 + dk - 2.0 * sk) * tt
    y = yk + hk * (sk * T.square(theta) + dk * tt) / denom
    logdet = _log_derivative(theta, sk, dk, dk1, denom)
    return T.where(inside, y, x), T.where(inside, logdet, 0.0)


def rq_spline_inverse(y: TensorLike, params: SplineParams):
    """y -> x with elementwise log|dx/dy|, solving the bin's quadratic for theta."""
    y = T.as_tensor(y)
    inside = np.abs(y.data) <= params.bound
    ys = T.where(inside, y, 0.0)
    idx = _bin_index(params.cum_heights.data, ys.data)
    xk, wk, yk, hk, dk, dk1, sk = _bin_terms(params, idx)

    offset = ys - yk
    slope_sum = dk1 + dk - 2.0 * sk
    a = hk * (sk - dk) + offset * slope_sum
    b = hk * dk - offset * slope_sum
    c = -sk * offset
    disc = T.relu(T.square(b) - 4.0 * a * c)
    theta = (2.0 * c) / (-b - T.sqrt(disc))
    x = theta * wk + xk

    denom = sk + slope_sum * theta * (1.0 - theta)
    logdet = -_log_derivative(theta, sk, dk, dk1, denom)
    return T.where(inside, x, y), T.where(inside, logdet, 0.0)
