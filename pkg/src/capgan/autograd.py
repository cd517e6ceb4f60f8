"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records its inputs and a backward rule.  Backward rules are
themselves written with primitives, so a gradient computed with
``create_graph=True`` is an ordinary recorded tensor and can be
differentiated again (needed for the gradient penalty).

Example
-------
>>> x = Tensor(3.0, requires_grad=True)
>>> (gx,) = grad(x * x, [x])
>>> float(gx.data)
6.0
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "concat",
    "stack",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "mean",
    "l2_norm",
    "softmax",
    "broadcast_rows",
    "broadcast_to",
    "sum_to",
    "reshape",
    "transpose",
    "index",
]

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(flag: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager: primitives evaluated inside are not recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array plus the record of how it was produced.

    ``parents`` and ``backward_fn`` are set only for recorded results; leaves
    created by the user carry ``requires_grad`` and nothing else.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.backward_fn = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
    else:
        out.requires_grad = False
        out.parents = ()
    return out


def _check_finite(out: Tensor, op: str) -> Tensor:
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    return out


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    # equal shapes, scalars, or trailing-suffix broadcast (vector over rows)
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# shape plumbing


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``a`` down to ``shape`` (adjoint of :func:`broadcast_to`)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    out = _result(data, (a,), "sum_to")
    if out.parents:
        src = a.shape
        out.backward_fn = lambda g: (broadcast_to(g, src),)
    return out


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _result(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to")
    if out.parents:
        src = a.shape
        out.backward_fn = lambda g: (sum_to(g, src),)
    return out


def broadcast_rows(v: Tensor, n_rows: int) -> Tensor:
    """Repeat a length-d vector into an ``n_rows x d`` matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ValueError(f"broadcast_rows: expected a vector, got shape {v.shape}")
    return broadcast_to(v, (n_rows, v.shape[0]))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.parents:
        src = a.shape
        out.backward_fn = lambda g: (reshape(g, src),)
    return out


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = _result(a.data.transpose(axes), (a,), "transpose")
    if out.parents:
        inv = tuple(np.argsort(axes))
        out.backward_fn = lambda g: (transpose(g, inv),)
    return out


def index(a: Tensor, key) -> Tensor:
    """``a[key]`` for basic slices or integer-array row selection."""
    a = as_tensor(a)
    picked = a.data[key]
    # basic slices return views; arrays are never mutated in place
    out = _result(np.asarray(picked, dtype=np.float64), (a,), "index")
    if out.parents:
        src = a.shape
        out.backward_fn = lambda g: (_scatter(g, key, src),)
    return out


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in parts)


def _scatter(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    data = np.zeros(shape)
    if _is_basic(key):
        data[key] = g.data
    else:
        np.add.at(data, key, g.data)
    out = _result(data, (g,), "scatter")
    if out.parents:
        out.backward_fn = lambda gg: (index(gg, key),)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat")
    if out.parents:
        bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

        def backward(g):
            pieces = []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                key = [slice(None)] * g.ndim
                key[ax] = slice(int(lo), int(hi))
                pieces.append(index(g, tuple(key)))
            return tuple(pieces)

        out.backward_fn = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ValueError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = _result(np.stack([t.data for t in tensors], axis=axis), tensors, "stack")
    if out.parents:
        ax = axis % (tensors[0].ndim + 1)

        def backward(g):
            pieces = []
            for i in range(len(tensors)):
                key = [slice(None)] * g.ndim
                key[ax] = i
                pieces.append(index(g, tuple(key)))
            return tuple(pieces)

        out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("add", a, b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.parents:
        sa, sb = a.shape, b.shape
        out.backward_fn = lambda g: (sum_to(g, sa), sum_to(g, sb))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("subtract", a, b)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.parents:
        sa, sb = a.shape, b.shape
        out.backward_fn = lambda g: (sum_to(g, sa), sum_to(neg(g), sb))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _result(-a.data, (a,), "neg")
    if out.parents:
        out.backward_fn = lambda g: (neg(g),)
    return out


def mul(a, b) -> Tensor:
    """Element-wise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("multiply", a, b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.parents:
        sa, sb = a.shape, b.shape
        out.backward_fn = lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb))
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out = _result(a.data * c, (a,), "scale")
    if out.parents:
        out.backward_fn = lambda g: (scale(g, c),)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("divide", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"divide: zero in denominator of shape {b.shape}")
    out = _result(a.data / b.data, (a, b), "div")
    if out.parents:
        sa, sb = a.shape, b.shape

        def backward(g):
            ga = div(g, b)
            return sum_to(ga, sa), sum_to(neg(mul(ga, out)), sb)

        out.backward_fn = backward
    return out


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")
    if out.parents:
        out.backward_fn = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        # exp overflow for very negative inputs correctly yields 0
        data = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(data, (a,), "sigmoid")
    if out.parents:
        out.backward_fn = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without underflow for large negative inputs."""
    a = as_tensor(a)
    x = a.data
    out = _result(np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))), (a,), "log_sigmoid")
    if out.parents:
        out.backward_fn = lambda g: (mul(g, sigmoid(neg(a))),)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.tanh(a.data), (a,), "tanh")
    if out.parents:
        out.backward_fn = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _check_finite(_result(np.exp(a.data), (a,), "exp"), "exp")
    if out.parents:
        out.backward_fn = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError(f"log: domain error, non-positive input (min {a.data.min()!r})")
    out = _result(np.log(a.data), (a,), "log")
    if out.parents:
        out.backward_fn = lambda g: (div(g, a),)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: domain error, negative input")
    out = _result(np.sqrt(a.data), (a,), "sqrt")
    if out.parents:
        out.backward_fn = lambda g: (div(scale(g, 0.5), out),)
    return out


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), "sum")
    if out.parents:
        src = a.shape
        kept = tuple(1 if i in axes else n for i, n in enumerate(src))
        out.backward_fn = lambda g: (broadcast_to(reshape(g, kept), src),)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axis=axes, keepdims=keepdims), 1.0 / max(n, 1))


def l2_norm(a, axis=None, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm ``sqrt(sum(a**2) + eps)`` over ``axis`` (all by default).

    ``eps`` keeps the derivative finite at the origin.
    """
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    sq = (a.data * a.data).sum(axis=axes, keepdims=True) + eps
    kept_data = np.sqrt(sq)
    data = kept_data if keepdims else kept_data.reshape(
        tuple(n for i, n in enumerate(a.shape) if i not in axes)
    )
    out = _result(np.asarray(data), (a,), "l2_norm")
    if out.parents:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        src = a.shape

        def backward(g):
            g_k = broadcast_to(reshape(g, kept), src)
            n_k = broadcast_to(reshape(out, kept), src)
            return (div(mul(g_k, a), n_k),)

        out.backward_fn = backward
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = _result(e / e.sum(axis=-1, keepdims=True), (a,), "softmax")
    if out.parents:

        def backward(g):
            dot = tsum(mul(g, out), axis=-1, keepdims=True)
            return (mul(out, sub(g, broadcast_to(dot, out.shape))),)

        out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# differentiation


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(
    root: Tensor,
    leaves: Iterable[Tensor],
    create_graph: bool = False,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each of ``leaves``.

    With ``create_graph=True`` the backward sweep is itself recorded, so the
    returned gradients can be differentiated again.  Leaves that do not
    influence ``root`` get zero gradients.
    """
    leaves = list(leaves)
    if grad_output is None and root.size != 1:
        raise ValueError(f"grad: root must be a scalar, got shape {root.shape}")
    for leaf in leaves:
        if not isinstance(leaf, Tensor) or not leaf.requires_grad:
            raise ValueError("grad: every leaf must be a Tensor with requires_grad=True")
    if grad_output is None:
        grad_output = Tensor(np.ones_like(root.data))
    wanted = {id(leaf) for leaf in leaves}
    grads: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = grad_output
        with _grad_mode(create_graph):
            for node in reversed(_toposort(root)):
                g = grads.get(id(node))
                if g is None or node.backward_fn is None:
                    continue
                if id(node) not in wanted:
                    del grads[id(node)]
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else add(prev, pg)
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        out.append(g if g is not None else Tensor(np.zeros(leaf.shape)))
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor | np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor shaped like ``theta`` to a scalar tensor.  The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    (analytic,) = grad(f(leaf), [leaf])
    analytic = analytic.data.reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
