"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
attaches a closure mapping the output gradient to input gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e9  # additive-mask sentinel standing in for -inf
_MASK_CUTOFF = NEG_INF / 2

_grad_enabled = True


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in a tensor."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NumericError("non-finite value produced")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p: float): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without an explicit gradient needs a scalar")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise ---------------------------------------------------------------

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


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 2:
        return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw)


# reductions and shape ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    if b.ndim == 1 or a.ndim == 1:
        raise DimensionError("matmul operands must be at least 2-D")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


# softmax and attention -----------------------------------------------------

def masked_softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``x + mask`` along ``axis``; fully masked slices give zeros.

    ``mask`` is an additive array of 0 / ``NEG_INF`` entries (broadcastable to
    ``x``). Entries at or below half the sentinel count as masked.
    """
    x = as_tensor(x)
    logits = x.data
    dead = None
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        logits = logits + mask
        dead = np.all(np.broadcast_to(mask, logits.shape) <= _MASK_CUTOFF, axis=axis, keepdims=True)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    if dead is not None and dead.any():
        p = np.where(dead, 0.0, p)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """``Softmax(q k^T / sqrt(d) + mask) v`` over the last two axes.

    Query rows whose mask is entirely ``NEG_INF`` return the zero vector.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention width must be positive")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        try:
            np.broadcast_shapes(m.shape, scores.shape)
        except ValueError as exc:
            raise DimensionError(f"mask {m.shape} vs scores {scores.shape}") from exc
    return matmul(masked_softmax(scores, mask, axis=-1), v)


# spatial -------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (B, H, W, C, kh, kw) -> (B*H*W, kh*kw*C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 convolution, NHWC input, kernel (kh, kw, cin, cout) with odd kh, kw."""
    x, w = as_tensor(x), as_tensor(w)
    kh, kw, cin, cout = w.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d input {x.shape} vs kernel {w.shape}")
    B, H, W, _ = x.shape
    if kh == 1 and kw == 1:
        y = matmul(x, w.reshape(cin, cout))
        return y + b if b is not None else y
    cols = _im2col(x.data, kh, kw)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm).reshape(B, H, W, cout)
    parents = [x, w] if b is None else [x, w, as_tensor(b)]
    if b is not None:
        out = out + parents[2].data

    def bw(g):
        g2 = g.reshape(B * H * W, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-swapped kernel
            wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (_im2col(g, kh, kw) @ wf).reshape(B, H, W, cin)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0).reshape(parents[2].shape))
        return tuple(grads)

    return _make(out, parents, bw)


def avg_pool2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (g,)

    return _make(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, with optional affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    y = _make(xhat, (x,), bw)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y
