import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))


def numerical_grad(fn, arrays, eps=1e-6):
    """Central finite differences of a scalar fn(dict of arrays) w.r.t. every entry."""
    grads = {}
    for name, value in arrays.items():
        g = np.zeros_like(value, dtype=np.float64)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (fn(plus) - fn(minus)) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(np.asarray(a, dtype=np.float64)), np.ravel(np.asarray(b, dtype=np.float64))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fd():
    return numerical_grad


@pytest.fixture
def rel_err():
    return relative_error
