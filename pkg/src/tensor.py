"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new immutable `Tensor` that remembers its inputs and a
backward rule. `grad(loss, params)` walks the resulting tape in reverse
topological order and returns one gradient array per parameter.

Only the ops the learners need are provided: elementwise arithmetic,
matmul, exp/log/tanh/relu/softplus/sigmoid/sqrt/pow, reductions
(sum, mean, logsumexp), softmax, gathers, concat/split/slicing,
reshape/swapaxes, where and cumsum.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from utils import NumericalError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Immutable float64 array plus the record of the op that produced it.

    Attributes
    ----------
    data : np.ndarray
        Read-only float64 values.
    op : str
        Op kind that produced the tensor ("leaf" for inputs and parameters).
    requires_grad : bool
        True when some parameter upstream needs a gradient.
    """

    # ndarray <op> Tensor dispatches to the Tensor's reflected operator
    __array_ufunc__ = None
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.op: str = "leaf"
        self.requires_grad: bool = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None

    @classmethod
    def _make(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward: Backward) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite output from op '{op}'", op=op)
        out = cls.__new__(cls)
        data.setflags(write=False)
        out.data = data
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ----- introspection ----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ----- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameters(arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """Wrap a name -> array mapping as gradient-tracking leaves."""
    return {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}


# ----- shape helpers ---------------------------------------------------------
def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape} in '{op}'") from None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes broadcasting added so that g matches `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int) -> int:
    return axis % ndim if ndim else 0


# ----- elementwise binary ops -----------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._make(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


# ----- elementwise unary ops ------------------------------------------------
def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, "neg", (a,), lambda g: (-g,))


def pow(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return Tensor._make(
        np.power(a.data, p), "pow", (a,),
        lambda g: (g * p * np.power(a.data, p - 1.0),),
    )


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, "exp", (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._make(out, "log", (a,), lambda g: (g / a.data,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * (a.data > 0.0),))


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        np.logaddexp(0.0, a.data), "softplus", (a,),
        lambda g: (g * special.expit(a.data),),
    )


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return Tensor._make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# ----- linear algebra --------------------------------------------------------
def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """(..., m, k) @ (..., k, n) -> (..., m, n); leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, "matmul", (a, b), backward)


# ----- reductions ------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(_norm_axis(ax, len(shape)) for ax in axes))
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = sum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(total.size, 1) if a.size else 1
    return div(total, float(count))


def logsumexp(a: TensorLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    kept = special.logsumexp(a.data, axis=axis, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(a.data - kept),)

    return Tensor._make(out, "logsumexp", (a,), backward)


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    s = special.softmax(a.data, axis=axis)
    return Tensor._make(
        s, "softmax", (a,),
        lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),),
    )


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = special.log_softmax(a.data, axis=axis)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, "log_softmax", (a,), backward)


def cumsum(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        np.cumsum(a.data, axis=axis), "cumsum", (a,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
    )


# ----- gathers / structure ---------------------------------------------------
def take(table: TensorLike, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids] (embedding gather); ids is an integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take: ids outside [0, {table.shape[0]})")

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._make(table.data[ids], "take", (table,), backward)


def take_along(a: TensorLike, idx: np.ndarray, axis: int = -1) -> Tensor:
    """np.take_along_axis with gradient scattered back to the picked entries."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    axis = _norm_axis(axis, a.ndim)

    def backward(g):
        out = np.zeros(a.shape)
        grids = list(np.indices(np.broadcast_shapes(idx.shape, g.shape), sparse=True))
        grids[axis] = idx
        np.add.at(out, tuple(grids), g)
        return (out,)

    return Tensor._make(np.take_along_axis(a.data, idx, axis=axis), "take_along", (a,), backward)


def one_hot(ids: np.ndarray, depth: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= depth):
        raise ShapeError(f"one_hot: ids outside [0, {depth})")
    return Tensor(np.eye(depth)[ids])


def getitem(a: TensorLike, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return (out,)

    return Tensor._make(a.data[key], "getitem", (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ndim = ts[0].ndim
    axis = _norm_axis(axis, ndim)
    for t in ts:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != ts[0].shape[:axis] + ts[0].shape[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in ts], axis=axis), "concat", ts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def split(a: TensorLike, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    parts, start = [], 0
    for size in sizes:
        key = [slice(None)] * a.ndim
        key[axis] = slice(start, start + size)
        parts.append(getitem(a, tuple(key)))
        start += size
    return parts


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return Tensor._make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: TensorLike, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        np.swapaxes(a.data, axis1, axis2), "swapaxes", (a,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def where(cond: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select from a where cond, else from b. cond is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(
        np.where(cond, a.data, b.data), "where", (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ----- densities -------------------------------------------------------------
def gaussian_log_density(x: TensorLike, mean: TensorLike, log_std: TensorLike) -> Tensor:
    """
    Diagonal Gaussian log-density summed over the last axis:
    sum(-0.5 log 2pi - log_std - 0.5 ((x - mean) / exp(log_std))^2).
    """
    x, mean, log_std = as_tensor(x), as_tensor(mean), as_tensor(log_std)
    dims = {t.shape[-1] if t.ndim else 1 for t in (x, mean, log_std)}
    if len(dims) != 1:
        raise ShapeError(
            f"gaussian_log_density: length mismatch {x.shape}, {mean.shape}, {log_std.shape}"
        )
    z = (x - mean) * exp(-log_std)
    return sum(-0.5 * LOG_2PI - log_std - 0.5 * square(z), axis=-1)


# ----- reverse mode -----------------------------------------------------------
class ComputationTape:
    """
    Topologically ordered record of the ops reachable from a scalar loss.

    `backward` visits every node once, in reverse order, accumulating
    gradients into the node's parents.
    """

    def __init__(self, loss: Tensor) -> None:
        self.loss = loss
        self.nodes: List[Tensor] = self._topological_order(loss)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, keep: Sequence[Tensor]) -> Dict[int, np.ndarray]:
        keep_ids = {id(t) for t in keep}
        grads: Dict[int, np.ndarray] = {id(self.loss): np.ones(self.loss.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if id(node) not in keep_ids:
                del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericalError(
                        f"non-finite gradient in backward of '{node.op}'", op=node.op
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return grads


def grad(loss: Tensor, params: Union[Mapping[str, Tensor], Sequence[Tensor]]):
    """
    Gradients of a scalar `loss` w.r.t. `params`.

    Returns a dict (for a mapping) or list (for a sequence) of float64
    arrays shaped like the parameters. Parameters the loss does not depend
    on get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    named = isinstance(params, Mapping)
    items = list(params.values()) if named else list(params)
    grads = ComputationTape(loss).backward(items)
    out = [
        np.array(grads[id(p)], dtype=np.float64).reshape(p.shape) if id(p) in grads else np.zeros(p.shape)
        for p in items
    ]
    if named:
        return dict(zip(params.keys(), out))
    return out


def value_and_grad(fn: Callable[[Dict[str, Tensor]], Tensor], arrays: Mapping[str, np.ndarray]):
    """Evaluate fn on tracked copies of `arrays`; return (loss value, grads)."""
    P = parameters(arrays)
    loss = fn(P)
    return float(loss.data), grad(loss, P)
