"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every differentiable op executed while it is active.
Ops run outside any tape (or on inputs that do not require gradients) are
plain numpy evaluations and record nothing, which doubles as ``no_grad``.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4.])
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a catalog primitive")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Ordered record of ops; creation order is already topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, out: Tensor) -> None:
        self.nodes.append(out)

    def backward(self, loss: Tensor) -> None:
        if not self.nodes:
            raise TapeError("backward() called on an empty tape")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._backward is None and not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf: accumulate into the persistent grad buffer
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64)
                    else:
                        parent.grad = parent.grad + pg
                else:
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
        if loss._backward is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


def backward(loss: Tensor) -> None:
    """Backpropagate through the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("backward() needs an active tape")
    tape.backward(loss)


def as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    tape = _active[-1] if _active else None
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---- element-wise binary ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None,
                            _unbroadcast(g * ad, bd.shape) if rb else None))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


# ---- element-wise unary ops --------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a: Tensor) -> Tensor:
    """sp(v) = log(1 + exp(v)), evaluated as logaddexp(0, v)."""
    d = a.data
    return _make(np.logaddexp(0.0, d), (a,), lambda g: (g * _sigmoid(d),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    d = a.data
    return _make(np.log(d), (a,), lambda g: (g / d,))


# ---- reductions and shape ops ------------------------------------------------

def _expand(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    return _make(np.sum(a.data, axis=axis), (a,), lambda g: (_expand(g, shape, axis),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    return _make(np.mean(a.data, axis=axis), (a,),
                 lambda g: (_expand(g, shape, axis) / n,))


def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    """Max-shifted log-sum-exp; finite for any finite input."""
    d = a.data
    m = np.max(d, axis=axis, keepdims=True)
    e = np.exp(d - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def back(g):
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.split(g, bounds[1:-1], axis=axis))

    return _make(out, tensors, back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]``; backward scatters with accumulation."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous rows ``a[lo:hi]``."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[lo:hi] = g
        return (out,)

    return _make(a.data[lo:hi], (a,), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Fused softmax + mean cross-entropy over the batch (natural log)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    t = np.asarray(targets)
    B, K = logits.shape
    if t.shape != (B,):
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.mod(t, 1) == 0):
            raise ValueError("cross_entropy targets must be integer class indices")
        t = t.astype(np.intp)
    if t.size and (t.min() < 0 or t.max() >= K):
        bad = t[(t < 0) | (t >= K)][0]
        raise ValueError(f"invalid class index {bad} for {K} classes")
    d = logits.data
    m = d.max(axis=1, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(s)[:, 0] + m[:, 0]
    rows = np.arange(B)
    loss = np.mean(lse - d[rows, t])
    probs = e / s

    def back(g):
        gl = probs.copy()
        gl[rows, t] -= 1.0
        return (gl * (g / B),)

    return _make(np.asarray(loss), (logits,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax (evaluation helper, not recorded)."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


# ---- finite-difference oracle -----------------------------------------------

def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        of[i] = (fp - fm) / (2.0 * h)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor); the floor only guards near-zero gradients."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = diff / scale
    return float(rel.max()) if rel.size else 0.0


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of ``loss_fn`` with central differences.

    Returns the max relative error over every entry of every parameter.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numerical_grad(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
