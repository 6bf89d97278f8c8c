"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every public op returns a new :class:`Node`; graphs are rebuilt for each
training step.  Broadcasting is limited to exact shape matches and 0-d
scalars, plus the explicit :func:`add_bias` used by the models.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import as_tensor

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Node", float, int, np.ndarray]

DIV_EPS = 1e-300


class Node:
    """A value in the computation graph.

    ``grad`` is filled by :func:`backward` for nodes that require a gradient.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "op", "grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple["Node", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{tag}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Node":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Node":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Node":
        return div(self, other)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def leaf(value, requires_grad: bool = True, name: Optional[str] = None) -> Node:
    return Node(as_tensor(value), requires_grad=requires_grad, name=name)


def const(value) -> Node:
    return Node(as_tensor(value), requires_grad=False, op="const")


def _lift(x: Operand) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value: np.ndarray, parents: Tuple[Node, ...], fn: BackwardFn, op: str) -> Node:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    req = any(p.requires_grad for p in parents)
    return Node(value, parents, fn if req else None, op, req)


def seqsum(arr: np.ndarray) -> float:
    """Sum in strict left-to-right flat order."""
    flat = arr.reshape(-1)
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])


def _broadcast_shapes(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array(seqsum(g))


# elementwise ---------------------------------------------------------------

def add(a: Operand, b: Operand) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), fn, "add")


def sub(a: Operand, b: Operand) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), fn, "sub")


def mul(a: Operand, b: Operand) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), fn, "mul")


def div(a: Operand, b: Operand) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "div")
    if (np.abs(b.value) < DIV_EPS).any():
        raise ZeroDivisionError(f"div: |denominator| < {DIV_EPS}")
    out = a.value / b.value

    def fn(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        )

    return _make(out, (a, b), fn, "div")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def absolute(a: Node) -> Node:
    # np.sign(0) == 0 gives the zero subgradient
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def square(a: Node) -> Node:
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def maximum(a: Node, s: float) -> Node:
    """Entrywise ``max(a, s)`` against a Python scalar; gradient 0 on ties."""
    mask = a.value > s
    return _make(np.where(mask, a.value, s), (a,), lambda g: (g * mask,), "maximum")


def minimum(a: Node, s: float) -> Node:
    return mul(maximum(mul(a, -1.0), -s), -1.0)


def relu(a: Node) -> Node:
    return maximum(a, 0.0)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": lambda a, _b=None: exp(a),
    "abs": lambda a, _b=None: absolute(a),
    "square": lambda a, _b=None: square(a),
    "max-with-scalar": maximum,
}


def elementwise(kind: str, a: Operand, b: Operand = None) -> Node:
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(_lift(a), b) if b is not None else op(_lift(a))


# reductions ----------------------------------------------------------------

def sum_(a: Node) -> Node:
    return _make(np.array(seqsum(a.value)), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Node) -> Node:
    n = a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _make(
        np.array(seqsum(a.value) / n), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean"
    )


def max_(a: Node) -> Node:
    """Global maximum; the gradient goes to the first arg-max in flat order."""
    if a.size == 0:
        raise ShapeError("max of an empty tensor")
    idx = int(np.argmax(a.value.reshape(-1)))

    def fn(g):
        out = np.zeros(a.size)
        out[idx] = float(g)
        return (out.reshape(a.shape),)

    return _make(np.array(a.value.reshape(-1)[idx]), (a,), fn, "max")


def check_indices(indices, size: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ShapeError("empty index list")
    if idx.min() < 0 or idx.max() >= size:
        raise IndexError(f"index out of range for {size} entries")
    if np.unique(idx).size != idx.size:
        raise ShapeError("indices must be distinct")
    return idx


def gather_mean(a: Node, indices) -> Node:
    """Mean of ``a`` over the supplied flat indices."""
    idx = check_indices(indices, a.size)
    k = idx.size

    def fn(g):
        out = np.zeros(a.size)
        out[idx] = float(g) / k
        return (out.reshape(a.shape),)

    return _make(np.array(seqsum(a.value.reshape(-1)[idx]) / k), (a,), fn, "gather-mean")


def reduce(kind: str, a: Node, indices: Optional[Sequence[int]] = None) -> Node:
    if kind == "sum":
        return sum_(a)
    if kind == "mean":
        return mean(a)
    if kind == "max":
        return max_(a)
    if kind == "gather-mean":
        if indices is None:
            raise ShapeError("gather-mean needs indices")
        return gather_mean(a, indices)
    raise ValueError(f"unknown reduction {kind!r}")


# structural ----------------------------------------------------------------

def reshape(a: Node, shape: Tuple[int, ...]) -> Node:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,), "transpose")


def take(a: Node, i: int) -> Node:
    """Slice ``a[i]`` along the leading axis."""

    def fn(g):
        out = np.zeros(a.shape)
        out[i] = g
        return (out,)

    return _make(a.value[i], (a,), fn, "take")


def add_bias(x: Node, b: Node, axis: int) -> Node:
    """Add the 1-D ``b`` along ``axis`` of ``x``."""
    axis = axis % x.value.ndim
    if b.value.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.value.ndim
    view[axis] = -1
    other = tuple(d for d in range(x.value.ndim) if d != axis)

    def fn(g):
        return g, g.sum(axis=other) if other else g

    return _make(x.value + b.value.reshape(view), (x, b), fn, "add_bias")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), fn, "matmul")


def _im2col(xv: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows ``(c, i, j)`` by columns ``(n, y, x)`` of zero-padded patches."""
    n, c, h, w = xv.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((c, n, h + 2 * ph, w + 2 * pw))
    padded[:, :, ph:ph + h, pw:pw + w] = xv.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[:, :, i:i + h, j:j + w]
    return cols.reshape(c * kh * kw, n * h * w)


def _correlate(xv: np.ndarray, kv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # the result is an (n, c, h, w) view over channel-major memory; elementwise
    # ops keep that layout so the next layer's im2col copies stay contiguous
    n, _, h, w = xv.shape
    co, _, kh, kw = kv.shape
    cols = _im2col(xv, kh, kw)
    out = (kv.reshape(co, -1) @ cols).reshape(co, n, h, w).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x: Node, k: Node) -> Node:
    """Same-padded 2-D cross-correlation.

    ``x`` is ``c_in x h x w`` or batched ``n x c_in x h x w``; ``k`` is
    ``c_out x c_in x kh x kw`` with odd kernel sizes.
    """
    batched = x.value.ndim == 4
    if x.value.ndim not in (3, 4) or k.value.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {k.shape}")
    xv = x.value if batched else x.value[None]
    co, ci, kh, kw = k.shape
    if ci != xv.shape[1]:
        raise ShapeError(f"conv2d: kernel expects {ci} channels, input has {xv.shape[1]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    out, cols = _correlate(xv, k.value)

    def fn(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(co, -1)
        gk = (g2 @ cols.T).reshape(k.shape)
        gx = None
        if x.requires_grad:
            # input gradient: correlate with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(k.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(g4, flipped)
            gx = gx if batched else gx[0]
        return gx, gk

    return _make(out if batched else out[0], (x, k), fn, "conv2d")


# backward ------------------------------------------------------------------

def _topo_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> Dict[Node, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Sets ``.grad`` on every node that requires a gradient and returns a map
    from each gradient-requiring leaf to its gradient.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: Dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        node.grad = g
        if node.backward_fn is None:
            if node.requires_grad and not node.parents:
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def grad_norm_sq(grads: Iterable[np.ndarray]) -> float:
    return float(sum(seqsum(g * g) for g in grads))
