"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds a node holding its output values, its parents and a
closure that maps the upstream gradient to one gradient per parent.
``backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_EPS = 1e-12
EXP_MAX = 40.0


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation's signature."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array with an optional gradient record."""

    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return len(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis: int) -> Tensor:
        return max_(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self) -> Tensor:
        return relu(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    # -- reverse pass ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar."""
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    post.reverse()
    return post


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.values / b.values
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)),
        "div",
    )


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _node(a.values**p, (a,), lambda g: (g * p * a.values ** (p - 1.0),), "pow")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,), "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
        "matmul",
    )


def bmm(a, b) -> Tensor:
    """Batched matrix product ``(B, N, K) @ (B, K, M) -> (B, N, M)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    return _node(
        np.matmul(a.values, b.values),
        (a, b),
        lambda g: (np.matmul(g, b.values.transpose(0, 2, 1)), np.matmul(a.values.transpose(0, 2, 1), g)),
        "bmm",
    )


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse (constant) matrix times dense tensor; used for graph aggregation."""
    x = as_tensor(x)
    if adj.shape[1] != x.shape[0]:
        raise ShapeError("spmm", adj.shape, x.shape)
    adj = sp.csr_matrix(adj)
    adj_t = adj.T.tocsr()
    return _node(np.asarray(adj @ x.values), (x,), lambda g: (np.asarray(adj_t @ g),), "spmm")


# -- elementwise unary --------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _node(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    """exp with its argument clamped below EXP_MAX."""
    a = as_tensor(a)
    live = a.values < EXP_MAX
    out = np.exp(np.minimum(a.values, EXP_MAX))
    return _node(out, (a,), lambda g: (g * out * live,), "exp")


def log(a: Tensor) -> Tensor:
    """Log of a probability; the argument is clamped to [LOG_EPS, 1 - LOG_EPS]."""
    a = as_tensor(a)
    lo, hi = LOG_EPS, 1.0 - LOG_EPS
    live = (a.values >= lo) & (a.values <= hi)
    clipped = np.clip(a.values, lo, hi)
    return _node(np.log(clipped), (a,), lambda g: (g * live / clipped,), "log")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.values >= lo
    if hi is not None:
        live &= a.values <= hi
    return _node(np.clip(a.values, lo, hi), (a,), lambda g: (g * live,), "clamp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


# -- reductions and shape -----------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max reduction along one axis; ties send the gradient to the first maximum."""
    a = as_tensor(a)
    idx = np.expand_dims(a.values.argmax(axis=axis), axis)
    out = np.take_along_axis(a.values, idx, axis=axis)

    def back(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(np.squeeze(out, axis=axis), (a,), back, "max")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of an empty list")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *(t.shape for t in tensors))
    out = np.stack([t.values for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, back, "stack")


def getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = a.values[key]

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), back, "getitem")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]``; faster scatter-add than generic indexing."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.values[idx]

    def back(g):
        flat = g.reshape(len(idx), -1)
        full = np.zeros((a.shape[0], flat.shape[1]))
        for col in range(flat.shape[1]):
            full[:, col] = np.bincount(idx.reshape(-1), weights=flat[:, col], minlength=a.shape[0])
        return (full.reshape(a.shape),)

    return _node(out, (a,), back, "take_rows")


def scatter_add(src: Tensor, idx, shape: tuple[int, ...]) -> Tensor:
    """out = zeros(shape); out[idx] += src.  Adjoint of gather."""
    src = as_tensor(src)
    out = np.zeros(shape)
    np.add.at(out, idx, src.values)
    return _node(out, (src,), lambda g: (g[idx],), "scatter_add")


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _node(
        np.where(mask, a.values, b.values),
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
        "where",
    )
