"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its forward result with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, records a
backward rule on that tape.  Outside a tape the ops are plain numpy calls, which
is what inference uses.

    >>> with Tape() as tape:
    ...     x = Tensor([[1.0, 2.0]], requires_grad=True)
    ...     loss = sum_all(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()
_DEBUG = False


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, double backward, ...)."""


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


def active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and type(data) is np.ndarray and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if dtype is None and arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise BackwardError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape is bound to the thread that entered it.  ``backward`` may run once;
    call :meth:`reset` before reusing the tape for another pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        if self._done:
            raise BackwardError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.nodes.append(_Node(tuple(inputs), out, backward))

    def reset(self) -> None:
        self.nodes = []
        self._done = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise BackwardError("backward() called twice on the same tape without reset()")
        if not self.nodes:
            raise BackwardError("tape is empty")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig
                else:
                    _accumulate(inp, ig)
        self.nodes = []


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by op")
    out = Tensor(data if data.dtype.kind == "f" else data.astype(np.float64))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# numpy kernels shared with the incremental decoder


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# differentiable ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight matrix: fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(*ad.shape[:-1], bd.shape[1]), (a, b), backward)

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, T, d) -> (B, h, T, d/h)."""
    b, t, d = x.shape
    if d % n_heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {n_heads} heads")
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, T, dk) -> (B, T, h*dk)."""
    b, h, t, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``p > 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = 1.0 - p
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    mask = (rng.random(x.shape, dtype=dt) < keep).astype(x.dtype) / x.dtype.type(keep)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Stable softmax.  ``allowed`` (broadcastable bool) zeroes disallowed entries."""
    data = x.data
    if allowed is not None:
        allowed = np.broadcast_to(allowed, data.shape)
        if not np.all(allowed.any(axis=axis)):
            raise ValueError("softmax: a slice has every position masked")
        data = np.where(allowed, data, -np.inf)
    y = softmax_np(data, axis=axis)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc / np.sqrt(var + eps)
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward)


def cross_entropy_label_smoothed(
    logits: Tensor, targets, epsilon: float = 0.0, pad_id: Optional[int] = None
) -> Tensor:
    """Mean label-smoothed cross-entropy over non-pad positions.

    ``logits`` is ``(..., V)`` and ``targets`` the matching index array.  The
    smoothed target puts ``1 - epsilon`` on the gold index and spreads
    ``epsilon / (V - 1)`` over every other entry.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} positions vs {tgt.shape[0]} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    keep = np.ones_like(tgt, dtype=bool) if pad_id is None else tgt != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no supervised positions")

    rows = np.nonzero(keep)[0]
    gold = tgt[rows]
    logp = log_softmax_np(flat[rows], axis=-1)
    off = epsilon / (v - 1) if v > 1 else 0.0
    q = np.full_like(logp, off)
    q[np.arange(len(rows)), gold] = 1.0 - epsilon
    loss = -(q * logp).sum() / n

    def backward(g):
        full = np.zeros_like(flat)
        full[rows] = (np.exp(logp) - q) * (g / n)
        return (full.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    loss.backward()
