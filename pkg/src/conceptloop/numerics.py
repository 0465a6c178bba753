"""Dense 2-D tensors with reverse-mode differentiation.

Every tensor is a row-major matrix; scalars are 1x1.  Operations record their
parents and a closure that pushes the output gradient back to them.  Calling
:func:`backward` on a scalar loss walks the graph in reverse topological order.

Broadcasting is limited to a scalar operand or a 1xN row added to every row of
an MxN matrix.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the storage precision (float64 in tests, float32 allowed in training)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


# ---- multiply counting ------------------------------------------------------

_counters: list["MulCounter"] = []


class MulCounter:
    """Counts scalar multiplies performed by :func:`matmul` inside a ``with`` block."""

    def __init__(self):
        self.count = 0

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


# ---- tensor -----------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, tensor has shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=_DTYPE)
    data.flags.writeable = False
    out.data = data
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.backward_fn = fn if out.requires_grad else None
    out.op = op
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.sum(g).reshape(1, 1)
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return np.sum(g, axis=0, keepdims=True)
    raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return
    if sb[0] == 1 and sb[1] == sa[1]:
        return
    if sa[0] == 1 and sa[1] == sb[1]:
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


# ---- elementary ops ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    (m, k), (k2, n) = a.shape, b.shape
    if k != k2:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    for c in _counters:
        c.count += m * k * n
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python number."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), "scale", lambda g: (g * c,))
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.sum(a.data).reshape(1, 1), (a,), "sum",
                 lambda g: (np.full(shape, g[0, 0], dtype=_DTYPE),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(sum_all(a), 1.0 / n)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: MxN -> 1xN."""
    m = a.shape[0]
    return _make(np.mean(a.data, axis=0, keepdims=True), (a,), "mean_rows",
                 lambda g: (np.repeat(g, m, axis=0) / m,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), "log_sigmoid", lambda g: (g * _sigmoid_np(-x),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=1, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _make(y, (a,), "softmax_rows", fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (a,), "log_softmax_rows",
                 lambda g: (g - p * np.sum(g, axis=1, keepdims=True),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.data for p in parts]), parts, "concat_rows", fn)


def take_rows(a: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size == 0:
        raise DimensionError("take_rows: empty index set")
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=_DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), "take_rows", fn)


def take(a: Tensor, i: int, j: int) -> Tensor:
    """Single element as a 1x1 tensor."""
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=_DTYPE)
        out[i, j] = g[0, 0]
        return (out,)

    return _make(a.data[i:i + 1, j:j + 1], (a,), "take", fn)


def reshape(a: Tensor, shape: tuple[int, int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


# ---- graph and backward -----------------------------------------------------


class Graph:
    """Topologically ordered nodes feeding a single output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor | Graph, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to ``wrt``.

    Unreachable tensors get a zero gradient.  Fan-out accumulates additively.
    """
    graph = loss if isinstance(loss, Graph) else Graph(loss)
    out = graph.output
    if out.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
    wrt = list(wrt)
    grads: dict[int, np.ndarray] = {id(out): np.ones((1, 1), dtype=_DTYPE)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return [grads.get(id(t), np.zeros(t.shape, dtype=_DTYPE)) for t in wrt]


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    y = f(leaf)
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("f(x) is not finite")
    (analytic,) = backward(y, [leaf])
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise EvaluationError("finite differences produced non-finite values")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err))


@contextlib.contextmanager
def dtype_scope(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)
