"""Small reverse-mode differentiation engine over numpy arrays.

Every operation returns a :class:`Node`. When any input requires a gradient
the node remembers its parents and a closure that pushes the incoming
gradient back to them. :func:`backward` walks the recorded graph once, in
reverse topological order.

Only what the field model, the Haar transform and the losses need is here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "Tape", "NumericalError", "tensor", "constant", "backward", "grad_check",
    "set_nan_check", "nan_check",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "relu", "sqrt", "square",
    "abs_", "exp", "log", "sum_", "mean", "getitem", "concat", "reshape", "broadcast_to",
    "affine", "decimate2x2", "gather_bilinear", "correlate_valid",
]

_NAN_CHECK = False


class NumericalError(FloatingPointError):
    """Raised when an op produces NaN while NaN checking is on."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"{op}: produced NaN{': ' + message if message else ''}")


def set_nan_check(enabled: bool) -> bool:
    """Toggle NaN detection on every op result. Returns the previous setting."""
    global _NAN_CHECK
    prev, _NAN_CHECK = _NAN_CHECK, bool(enabled)
    return prev


class nan_check:
    """Context manager enabling NaN detection (used by the fitting loop)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self._prev = set_nan_check(self.enabled)
        return self

    def __exit__(self, *exc):
        set_nan_check(self._prev)


class Node:
    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward", "name",
                 "_consumed", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None, name: str | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item: node holds {self.value.size} values, expected one")
        return float(self.value.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad: bool = False, dtype=None, name: str | None = None) -> Node:
    arr = np.array(value, dtype=dtype if dtype is not None else None, copy=True)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return Node(arr, requires_grad=requires_grad, name=name)


def constant(value, dtype=None) -> Node:
    if isinstance(value, Node):
        return value
    arr = np.asarray(value, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Node(arr)


def _lift(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float)) and like is not None:
        return Node(np.asarray(x, dtype=like.value.dtype))
    return constant(x)


def _finish(op: str, value, parents: Sequence[Node], backward_fn) -> Node:
    if _NAN_CHECK and np.isnan(value).any():
        shapes = ", ".join(str(p.value.shape) for p in parents)
        raise NumericalError(op, f"input shapes {shapes}")
    if any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}") from None


# ---------------------------------------------------------------------------
# element-wise binary ops

def add(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)
    return _finish("add", a.value + b.value, (a, b), bw)


def sub(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)
    return _finish("sub", a.value - b.value, (a, b), bw)


def mul(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.value.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.value.shape) if b.requires_grad else None
        return ga, gb
    return _finish("mul", a.value * b.value, (a, b), bw)


def div(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    _broadcast_shape("div", a, b)
    out = a.value / b.value

    def bw(g):
        ga = _unbroadcast(g / b.value, a.value.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.value.shape) if b.requires_grad else None
        return ga, gb
    return _finish("div", out, (a, b), bw)


def neg(a: Node) -> Node:
    return _finish("neg", -a.value, (a,), lambda g: (-g,))


def affine(a: Node, scale, shift=0.0) -> Node:
    """``scale * a + shift`` with constant (broadcastable) scale and shift."""
    scale = np.asarray(scale, dtype=a.value.dtype)
    shift = np.asarray(shift, dtype=a.value.dtype)
    out = a.value * scale + shift
    return _finish("affine", out, (a,), lambda g: (_unbroadcast(g * scale, a.value.shape),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb
    return _finish("matmul", a.value @ b.value, (a, b), bw)


def transpose(a: Node) -> Node:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _finish("transpose", a.value.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# element-wise unary ops

def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)
    return _finish("relu", out, (a,), lambda g: (g * (out > 0),))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)

    def bw(g):
        if np.any(out == 0):
            raise ZeroDivisionError("sqrt: backward through sqrt(0) is undefined")
        return (g / (2 * out),)
    return _finish("sqrt", out, (a,), bw)


def square(a: Node) -> Node:
    return _finish("square", a.value * a.value, (a,), lambda g: (2 * g * a.value,))


def abs_(a: Node) -> Node:
    # subgradient 0 at 0
    return _finish("abs", np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return _finish("log", np.log(a.value), (a,), lambda g: (g / a.value,))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _finish("sum", np.asarray(out), (a,), bw)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(shape[i] for i in axes)
    inv = 1.0 / count

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape),)
    return _finish("mean", np.asarray(out), (a,), bw)


def getitem(a: Node, index) -> Node:
    out = a.value[index]
    shape, dtype = a.value.shape, a.value.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)
    return _finish("getitem", np.array(out, copy=True), (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = [_lift(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = [n.shape for n in nodes]
        raise ValueError(f"concat: shape mismatch {shapes}") from None
    splits = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _finish("concat", out, nodes, bw)


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return _finish("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Node, shape) -> Node:
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: shape mismatch {a.shape} vs {tuple(shape)}") from None
    return _finish("broadcast", np.array(out), (a,), lambda g: (_unbroadcast(g, a.value.shape),))


# ---------------------------------------------------------------------------
# imaging kernels

def decimate2x2(a: Node, kernel) -> Node:
    """Strided 2x2 stencil on the two leading axes.

    ``out[i, j] = sum_{p,q} kernel[p, q] * a[2i + p, 2j + q]``
    """
    k = np.asarray(kernel, dtype=a.value.dtype)
    h, w = a.value.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"decimate2x2: leading dims must be even, got {a.shape}")
    x = a.value
    out = k[0, 0] * x[0::2, 0::2] + k[0, 1] * x[0::2, 1::2] + k[1, 0] * x[1::2, 0::2] + k[1, 1] * x[1::2, 1::2]

    def bw(g):
        full = np.empty_like(x)
        full[0::2, 0::2] = k[0, 0] * g
        full[0::2, 1::2] = k[0, 1] * g
        full[1::2, 0::2] = k[1, 0] * g
        full[1::2, 1::2] = k[1, 1] * g
        return (full,)
    return _finish("decimate2x2", out, (a,), bw)


def gather_bilinear(table: Node, index: np.ndarray, weight: np.ndarray) -> Node:
    """Weighted gather of table rows.

    ``table`` is (cells, F); ``index`` and ``weight`` are (N, K). Returns
    ``out[n] = sum_k weight[n, k] * table[index[n, k]]`` with shape (N, F).
    """
    t = table.value
    if t.ndim != 2 or index.shape != weight.shape:
        raise ValueError(f"gather_bilinear: shape mismatch {t.shape} vs {index.shape}/{weight.shape}")
    w = weight.astype(t.dtype, copy=False)
    out = np.einsum("nk,nkf->nf", w, t[index])
    flat_index = index.ravel()

    def bw(g):
        contrib = w[:, :, None] * g[:, None, :]
        grad = np.empty_like(t)
        for f in range(t.shape[1]):
            grad[:, f] = np.bincount(flat_index, weights=contrib[:, :, f].ravel(), minlength=t.shape[0])
        return (grad,)
    return _finish("gather_bilinear", out, (table,), bw)


def correlate_valid(a: Node, kernel: np.ndarray, axis: int) -> Node:
    """1-D correlation along ``axis`` keeping only fully-overlapping positions."""
    k = np.asarray(kernel, dtype=a.value.dtype)
    n = a.value.shape[axis]
    m = k.shape[0]
    if n < m:
        raise ValueError(f"correlate_valid: axis length {n} shorter than kernel {m}")
    n_out = n - m + 1
    x = np.moveaxis(a.value, axis, 0)
    out = k[0] * x[0:n_out]
    for t in range(1, m):
        out = out + k[t] * x[t:t + n_out]

    def bw(g):
        g0 = np.moveaxis(g, axis, 0)
        full = np.zeros_like(x)
        for t in range(m):
            full[t:t + n_out] += k[t] * g0
        return (np.moveaxis(full, 0, axis),)
    return _finish("correlate_valid", np.moveaxis(out, 0, axis), (a,), bw)


# ---------------------------------------------------------------------------
# backward pass

@dataclass
class Tape:
    """Topologically ordered record of one forward pass, rooted at a scalar."""

    root: Node
    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Node) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(root=root, nodes=order)

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf]


def backward(root: Node, params: Iterable[Node] | None = None) -> dict:
    """Backpropagate from a scalar root and return ``{leaf: grad}``.

    Leaf gradients accumulate into ``leaf.grad``. Each graph can be
    traversed once; a second call raises ``RuntimeError``. Leaves listed in
    ``params`` that the root does not depend on get zero gradients.
    """
    if not isinstance(root, Node):
        raise TypeError(f"backward: expected a Node, got {type(root).__name__}")
    if root.value.size != 1 or root.value.ndim != 0:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward: graph already consumed; run a new forward pass")

    grads: dict = {}
    if root.requires_grad:
        tape = Tape.record(root)
        pending = {id(root): np.ones_like(root.value)}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                grads[node] = node.grad
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg if pg.dtype == p.value.dtype else pg.astype(p.value.dtype)
        for node in tape.nodes:
            if not node.is_leaf:
                node._backward = None
                node.parents = ()
                node._consumed = True
    root._consumed = True

    if params is not None:
        for p in params:
            if p not in grads:
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
                grads[p] = p.grad
    return grads


def grad_check(fn: Callable[[], Node], params: Sequence[Node], h: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-9) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the scalar graph from the current parameter values. The
    error per coordinate is ``|a - c| / (|a| + |c| + 1e-12)``; coordinates
    where both are below ``floor`` count as exact (set it from the finite
    difference noise, about ``eps * |f| / h``, when ``f`` is not small). With ``max_coords`` only a
    random subset of each parameter's coordinates is perturbed.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    for p in params:
        p.grad = None
    analytic = backward(fn(), params=params)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_flat = analytic[p].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = fn().item()
            flat[c] = orig - h
            down = fn().item()
            flat[c] = orig
            if math.isnan(up) or math.isnan(down):
                raise FloatingPointError(f"grad_check: NaN at parameter {pi} coordinate {int(c)}")
            numeric = (up - down) / (2 * h)
            a = float(a_flat[c])
            if abs(a) < floor and abs(numeric) < floor:
                continue
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst
