"""Dense float64 tensors with tape-based reverse-mode gradients, plus Adam.

A :class:`Tensor` records the operation that produced it; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.
:class:`Param` is a leaf tensor that additionally carries Adam moments.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        if _detach_replay is not None:
            return Tensor(_detach_replay.take(self.data))
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # graph bookkeeping -------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __pow__(self, k: float) -> "Tensor":
        return power(self, k)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


class Param(Tensor):
    """Trainable leaf tensor with Adam state."""

    __slots__ = ("adam_m", "adam_v", "step_count", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"cannot assign {value.shape} into {self.data.shape}")
        self.data = value.copy()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data, parents: tuple, backward) -> Tensor:
    if _needs(*parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, k: float) -> Tensor:
    ad = a.data
    return _make(ad**k, (a,), lambda g: (g * k * ad ** (k - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# reductions and shape ---------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), back)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` for an integer index array; backward is a scatter-add."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def put_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` replaced by ``values`` (``idx`` unique)."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    if values.shape != (len(idx),) + base.shape[1:]:
        raise DimensionError(f"cannot put {values.shape} into rows of {base.shape}")
    out = base.data.copy()
    out[idx] = values.data

    def back(g):
        gb = np.array(g, copy=True)
        gb[idx] = 0.0
        return gb, g[idx]

    return _make(out, (base, values), back)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    width = a.shape[axis] // sections
    out = []
    for k in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(k * width, (k + 1) * width)
        out.append(getitem(a, tuple(index)))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


# softmax family ---------------------------------------------------------


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _make(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_xent(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` may be a vector with an integer target or a (B, K) matrix
    with one target per row.
    """
    logits = as_tensor(logits)
    if logits.shape[-1] == 0:
        raise DimensionError("empty logits")
    squeeze = logits.ndim == 1
    if squeeze:
        logits = reshape(logits, (1, -1))
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if target.shape[0] != logits.shape[0]:
        raise DimensionError("one target per row required")
    if np.any(target < 0) or np.any(target >= logits.shape[1]):
        raise IndexError(f"target index out of range for {logits.shape[1]} candidates")
    lp = log_softmax(logits, axis=1)
    picked = getitem(lp, (np.arange(target.shape[0]), target))
    return -mean(picked)


def kl_div(teacher_logits, student_logits) -> Tensor:
    """KL(softmax(teacher) || softmax(student)), mean over rows.

    The teacher side is detached: gradient reaches the student only.
    """
    t = as_tensor(teacher_logits)
    s = as_tensor(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"kl_div length mismatch {t.shape} vs {s.shape}")
    if t.ndim == 1:
        t, s = reshape(t, (1, -1)), reshape(s, (1, -1))
    lp_t = log_softmax(t.detach(), axis=1).data
    p_t = np.exp(lp_t)
    lp_s = log_softmax(s, axis=1)
    return mean(tsum(mul(add(lp_t, neg(lp_s)), p_t), axis=1))


# optimisation -----------------------------------------------------------


def adam_step(p: Param, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    b1, b2 = betas
    g = p.grad
    p.step_count += 1
    p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
    p.adam_v = b2 * p.adam_v + (1.0 - b2) * g * g
    m_hat = p.adam_m / (1.0 - b1**p.step_count)
    v_hat = p.adam_v / (1.0 - b2**p.step_count)
    p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: Iterable[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            adam_step(p, self.lr, self.betas, self.eps)


class _DetachReplay:
    """Records the values of detached tensors, then hands them back in call order."""

    def __init__(self):
        self.saved: list[np.ndarray] = []
        self.recording = True
        self.pos = 0

    def take(self, value: np.ndarray) -> np.ndarray:
        if self.recording:
            self.saved.append(value.copy())
            return value
        out = self.saved[self.pos]
        self.pos += 1
        return out

    def rewind(self) -> None:
        self.recording = False
        self.pos = 0


_detach_replay: _DetachReplay | None = None


def grad_check(loss_fn: Callable[[], Tensor], p: Param, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    Detached tensors (KL teachers, the diffusion target) are constants for
    the tape, so the perturbed evaluations reuse their values from the base
    point: both sides then differentiate the same function.
    """
    global _detach_replay
    if p.data.size == 0:
        return 0.0
    replay = _DetachReplay()
    _detach_replay = replay
    try:
        return _grad_check(loss_fn, p, h, replay)
    finally:
        _detach_replay = None


def _grad_check(loss_fn, p: Param, h: float, replay: _DetachReplay) -> float:
    p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = p.grad.copy()
    numeric = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        replay.rewind()
        up = float(loss_fn().data)
        flat[i] = orig - h
        replay.rewind()
        down = float(loss_fn().data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss is not finite near the parameter")
        numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# randomness -------------------------------------------------------------


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage derived from one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))
