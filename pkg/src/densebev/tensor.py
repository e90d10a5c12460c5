"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op records its parents and a closure that pushes the output gradient
back to them. :meth:`Tensor.backward` replays those closures in reverse
topological order. Only the ops the detector needs are provided.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

MASK_VALUE = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self, grad=None, retain: bool = False):
        """Accumulate gradients into leaves; ``retain`` also stores them on intermediates."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if retain:
                node.grad = g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def take_rows(a, rows) -> Tensor:
    return index(a, np.asarray(rows, dtype=np.int64))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def detach(a) -> Tensor:
    """Same values, no gradient path to ``a``'s ancestors."""
    value = as_tensor(a).data.copy()
    if _active_tape is not None:
        value = _active_tape.take(value)
    return Tensor(value)


class DetachTape:
    """Freezes ``detach`` outputs across repeated evaluations of one function.

    The first evaluation under :meth:`active` records every detached value;
    later ones replay them in call order. Finite differences taken this way
    differentiate the function with its gradient stops held constant, which
    is what the analytic gradient describes.
    """

    def __init__(self):
        self.values = []
        self._replay = False
        self._pos = 0

    @contextlib.contextmanager
    def active(self):
        global _active_tape
        prev, _active_tape = _active_tape, self
        self._replay = bool(self.values)
        self._pos = 0
        try:
            yield self
        finally:
            _active_tape = prev

    def take(self, value: np.ndarray) -> np.ndarray:
        if not self._replay:
            self.values.append(value.copy())
            return value
        if self._pos >= len(self.values) or self.values[self._pos].shape != value.shape:
            raise RuntimeError("detach calls differ from the recorded evaluation")
        out = self.values[self._pos].copy()
        self._pos += 1
        return out


_active_tape: DetachTape | None = None


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# normalisation and attention


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layernorm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation over the last axis, optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def masked_attention(q, k, v, mask=None, heads: int = 1, bias=None) -> Tensor:
    """Scaled dot-product attention with a binary suppression mask.

    ``mask`` is a bool ``(n_q, n_k)`` array (or anything with ``.bits``),
    ``True`` entries get an additive ``-1e9`` before the softmax. Rows that are
    fully masked output zeros. ``bias`` is an optional constant additive
    ``(n_q, n_k)`` term.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    nq, d = q.shape
    nk = k.shape[0]
    if d == 0:
        raise ValueError("attention width must be positive")
    if k.shape != (nk, d) or v.shape[0] != nk:
        raise ValueError(f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    dv = v.shape[1]
    if d % heads or dv % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(getattr(mask, "bits", mask), dtype=bool)
        if mask.shape != (nq, nk):
            raise ValueError(f"mask shape {mask.shape} does not match ({nq}, {nk})")
    dh, dvh = d // heads, dv // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, heads, dvh).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1) * scale
    if bias is not None:
        s = s + np.asarray(bias, dtype=np.float64)
    if mask is not None:
        s = s + np.where(mask, MASK_VALUE, 0.0)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    if mask is not None:
        dead = mask.all(axis=1)
        if dead.any():
            p[:, dead, :] = 0.0
    o = p @ vh
    out = o.transpose(1, 0, 2).reshape(nq, dv)

    def backward(g):
        gh = g.reshape(nq, heads, dvh).transpose(1, 0, 2)
        gv = p.transpose(0, 2, 1) @ gh
        gp = gh @ vh.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        return (gq.transpose(1, 0, 2).reshape(nq, d),
                gk.transpose(1, 0, 2).reshape(nk, d),
                gv.transpose(1, 0, 2).reshape(nk, dv))

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


def l1(pred, target, weights=None) -> Tensor:
    """Sum of (optionally weighted) absolute differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    w = 1.0 if weights is None else np.asarray(weights, dtype=np.float64)
    val = np.sum(np.abs(diff) * w)

    def backward(g):
        gd = g * np.sign(diff) * w
        return (_unbroadcast(np.broadcast_to(gd, pred.shape).copy(), pred.shape),
                _unbroadcast(-np.broadcast_to(gd, target.shape).copy(), target.shape))

    return _make(val, (pred, target), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over rows; ``labels`` are integer classes."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    val = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(val, (logits,), backward)


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over all entries of ``logits``."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    p = _sigmoid(x)
    ce = np.logaddexp(0.0, x) - t * x
    p_t = p * t + (1.0 - p) * (1.0 - t)
    a_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    mod = (1.0 - p_t) ** gamma
    val = np.sum(a_t * mod * ce)

    def backward(g):
        dmod = -gamma * (1.0 - p_t) ** (gamma - 1.0) * (2.0 * t - 1.0) * p * (1.0 - p)
        return (g * a_t * (dmod * ce + mod * (p - t)),)

    return _make(val, (logits,), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |fd|).

    ``coords`` optionally restricts the finite differences to those flat
    indices (for large inputs).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else [int(i) for i in coords]
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(x0)).item()
            flat[i] = old - h
            fm = f(Tensor(x0)).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    idx = np.asarray(list(idx), dtype=np.int64)
    a, fd = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
    err = np.abs(a - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0
