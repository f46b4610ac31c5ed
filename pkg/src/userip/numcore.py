"""Dense tensors with a dynamic reverse-mode tape.

Values are float64 unless a float32 array is passed in, which keeps float32
(used for fast frozen-model evaluation); mixed inputs promote to float64.

Every differentiable op records a closure on the thread's current :class:`Tape`.
``backward`` replays the tape in exact reverse recording order, accumulates into
leaf ``grad`` buffers and then releases the tape and all intermediate gradients.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __getitem__ = lambda a, idx: getitem(a, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops (topological by construction)."""

    ops: list = field(default_factory=list)

    def __len__(self):
        return len(self.ops)

    def clear(self):
        for op in self.ops:
            op.output._tape = None
        self.ops.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def tape_scope(tape: Tape | None = None):
    """Record onto ``tape`` (a fresh one by default) within the block."""
    prev = getattr(_local, "tape", None)
    _local.tape = tape if tape is not None else Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


@contextmanager
def no_grad():
    prev = getattr(_local, "disabled", False)
    _local.disabled = True
    try:
        yield
    finally:
        _local.disabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name, inputs, out_data, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._leaf = False
    out.name = None
    needs = any(t.requires_grad for t in inputs) and not getattr(_local, "disabled", False)
    out.requires_grad = needs
    out._tape = None
    if needs:
        tape = current_tape()
        tape.ops.append(_Op(name, tuple(inputs), out, backward))
        out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; bare scalar constants take the other side's dtype."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0 and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    elif not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("pow", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log, floored at ``EPS``."""
    a = as_tensor(a)
    safe = np.maximum(a.data, EPS)
    return _record("log", (a,), np.log(safe), lambda g: (g * (a.data > EPS) / safe,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.array(x2 * 0.044715)
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out = np.asarray(out * 0.5)

    def back(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 * 0.044715 x^2)
        d = np.array(x2 * (3 * 0.044715))
        d += 1.0
        d *= _GELU_C
        d *= x
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _record("gelu", (a,), out, back)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def stop_gradient(a) -> Tensor:
    """Forward identity, zero backward."""
    return Tensor(as_tensor(a).data)


def straight_through(x, q) -> Tensor:
    """Value of ``q`` with the identity Jacobian routed to ``x``.

    ``q`` itself still receives the incoming gradient, so a code vector used in
    the forward pass is trained by downstream losses as well.
    """
    x, q = as_tensor(x), as_tensor(q)
    if x.shape != q.shape:
        raise ShapeError(f"straight_through shapes differ: {x.shape} vs {q.shape}")
    return _record("straight_through", (x, q), q.data.copy(), lambda g: (g, g))


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reductions and shapes
# ----------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out, dtype=a.data.dtype), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * float(1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", (a,), a.data[idx], back)


def take_rows(table, ids) -> Tensor:
    """Gather ``table[ids]`` along the first axis (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _record("take_rows", (table,), table.data[ids], back)


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _record("where", (a, b), np.where(cond, a.data, b.data),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ----------------------------------------------------------------------------
# linear algebra and normalisation
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(Batched) matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            return ga, (a2.T @ g2 if b.requires_grad else None)

        return _record("matmul", (a, b), out, back2)

    def back(g):
        # frozen operands (e.g. LM weights during soft-prompt fitting) get no gradient
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, back)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; ``mask`` False entries get probability zero."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.maximum(s, EPS)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", (x,), out,
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(x, gain=None, bias=None, eps: float = EPS) -> Tensor:
    """Normalise the last axis; optional affine ``gain``/``bias``."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.sum(axis=-1, keepdims=True) / n),)

    out = _record("layernorm", (x,), xhat, back)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean next-token NLL over the positions where ``mask`` is true.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``mask`` have the leading
    shape. Raises if no position is selected.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    V = logits.shape[-1]
    if targets.shape != lead:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: no unmasked positions")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= V:
        raise ValueError(f"cross_entropy: target outside vocabulary [0, {V})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (mask[..., None] / p.dtype.type(n)),)

    return _record("cross_entropy", (logits,), np.asarray(loss), back)


def binary_cross_entropy(prob, labels) -> Tensor:
    """Mean BCE of probabilities, clipped to [EPS, 1 - EPS]."""
    prob = as_tensor(prob)
    y = np.asarray(labels, dtype=np.float64).reshape(prob.shape)
    p = np.clip(prob.data, EPS, 1.0 - EPS)
    n = p.size
    loss = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    inside = (prob.data >= EPS) & (prob.data <= 1.0 - EPS)

    def back(g):
        return (g * inside * (-(y / p) + (1 - y) / (1 - p)) / n,)

    return _record("bce", (prob,), np.asarray(loss), back)


# ----------------------------------------------------------------------------
# backward and checking
# ----------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced on a live tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``point`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with tape_scope():
        x = Tensor(x0, requires_grad=True)
        loss = f(x)
        backward(loss)
    analytic = x.grad.copy()
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += step
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * step
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(analytic, numeric, np.abs(analytic - numeric) / denom, tol)


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay over a list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RowAdam:
    """Adam over the rows of a dense table, each row with its own step count.

    Used for per-user parameters: a row only moves when it is in the batch.
    """

    def __init__(self, table: np.ndarray, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.table = table
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros_like(table)
        self.v = np.zeros_like(table)
        self.t = np.zeros(table.shape[0], dtype=np.int64)

    def step(self, rows: np.ndarray, grad: np.ndarray):
        rows = np.asarray(rows, dtype=np.int64)
        self.t[rows] += 1
        shape = (-1,) + (1,) * (self.table.ndim - 1)
        c1 = (1 - self.b1 ** self.t[rows]).reshape(shape)
        c2 = (1 - self.b2 ** self.t[rows]).reshape(shape)
        m = self.b1 * self.m[rows] + (1 - self.b1) * grad
        v = self.b2 * self.v[rows] + (1 - self.b2) * grad * grad
        self.m[rows] = m
        self.v[rows] = v
        upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        if self.weight_decay:
            upd = upd + self.lr * self.weight_decay * self.table[rows]
        self.table[rows] -= upd
