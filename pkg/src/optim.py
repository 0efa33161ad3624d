"""
First-order optimizers over name -> array parameter sets.

`adamw_step` is functional: it returns new parameter arrays and a new
state, leaving its inputs untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from utils import ShapeError

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class OptimizerState:
    """
    Adam/AdamW moments and hyperparameters.

    Attributes
    ----------
    lr, beta1, beta2, eps, weight_decay : float
        Hyperparameters; weight_decay is decoupled (AdamW).
    step : int
        Number of updates applied so far.
    m, v : dict[str, np.ndarray]
        First/second moment estimates, shaped like the parameters.
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def init_state(params: Mapping[str, np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4) -> OptimizerState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return OptimizerState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay, step=0,
        m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
    )


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """
    One AdamW update.

    param <- param - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * param
    """
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            found = None if name not in grads else grads[name].shape
            raise ShapeError(f"gradient for '{name}' has shape {found}, expected {p.shape}")
        if state.m.get(name) is None or state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer state for '{name}' does not match its parameter")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        new_params[name] = p - state.lr * update - state.lr * state.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """Plain Adam: AdamW with the decay switched off."""
    if state.weight_decay != 0.0:
        state = replace(state, weight_decay=0.0)
    return adamw_step(params, grads, state)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Params, float]:
    """Rescale grads so their global norm is at most max_norm (None disables)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class AdamW:
    """
    Stateful wrapper used by the training loops.

    Usage:
        opt = AdamW(params, lr=3e-4, clip_norm=10.0)
        params = opt.step(params, grads)
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 3e-4, *,
                 weight_decay: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: Optional[float] = 10.0) -> None:
        self.state = init_state(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                weight_decay=weight_decay)
        self.clip_norm = clip_norm
        self.last_grad_norm: float = 0.0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Params:
        grads, self.last_grad_norm = clip_grad_norm(grads, self.clip_norm)
        new_params, self.state = adamw_step(params, grads, self.state)
        return new_params


class Adam(AdamW):
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 3e-3, **kwargs) -> None:
        kwargs["weight_decay"] = 0.0
        super().__init__(params, lr=lr, **kwargs)
