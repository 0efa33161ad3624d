"""
Parameter blocks shared by the predictor, the flows and their decoders.

A block only knows its structure and parameter names; the values live in a
flat name -> array dict owned by the model, so optimizers and checkpoints
handle every model the same way.
"""
from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

import numpy as np

import tensor as T
from tensor import Tensor

Params = Dict[str, np.ndarray]


class Linear:
    """x @ W + b with W stored as (n_in, n_out)."""

    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self.name = name
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.bias = bias

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    def init(self, rng: np.random.Generator, scale: Optional[float] = None,
             bias_init: Optional[np.ndarray] = None) -> Params:
        # He-uniform unless an explicit scale is given (0.0 gives a zero layer)
        if scale is None:
            limit = np.sqrt(6.0 / max(self.n_in, 1))
            w = rng.uniform(-limit, limit, size=(self.n_in, self.n_out))
        else:
            w = rng.normal(0.0, 1.0, size=(self.n_in, self.n_out)) * scale
        params = {self.weight_name: w}
        if self.bias:
            b = np.zeros(self.n_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
            params[self.bias_name] = np.broadcast_to(b, (self.n_out,)).copy()
        return params

    def __call__(self, P: Mapping[str, Tensor], x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        w = P[self.weight_name] if weight is None else weight
        out = T.matmul(x, w)
        if self.bias:
            out = out + P[self.bias_name]
        return out


class MLP:
    """
    relu MLP: n_in -> hidden... -> n_out, no activation on the output.

    The last layer can be zero-initialized with a chosen bias so a
    conditioner starts out emitting a fixed vector (identity spline, unit
    Gaussian, ...).
    """

    def __init__(self, name: str, n_in: int, hidden: Sequence[int], n_out: int) -> None:
        sizes = [int(n_in), *[int(h) for h in hidden], int(n_out)]
        self.name = name
        self.layers = [Linear(f"{name}.{i}", sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def init(self, rng: np.random.Generator, out_scale: Optional[float] = None,
             out_bias: Optional[np.ndarray] = None) -> Params:
        params: Params = {}
        for layer in self.layers[:-1]:
            params.update(layer.init(rng))
        params.update(self.layers[-1].init(rng, scale=out_scale, bias_init=out_bias))
        return params

    def __call__(self, P: Mapping[str, Tensor], x: Tensor) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = T.relu(layer(P, h))
        return self.layers[-1](P, h)
