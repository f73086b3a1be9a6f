"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Every trainable computation in the package runs on these tensors. Storage is
row-major float32; reductions (matrix products, softmax normalizers, sums,
normalization statistics) accumulate in float64 before casting back, which is
what lets float32 finite-difference gradient checks land below 1e-3.

The tape is implicit: each op output keeps references to its parents and a
closure computing parent gradients. ``backward`` walks that graph once per
call and *accumulates* into ``.grad``, so calling it twice without
``zero_grad`` doubles every gradient. Tensors are treated as immutable once
created; sharing them across threads for reading is safe, but a single
backward graph must stay on one thread.

Elementwise binary ops follow numpy broadcasting; anything incompatible
raises :class:`ShapeError` naming the op and both shapes. Ops with stricter
rules (matmul is strictly 2-D, conv2d is NCHW) document and enforce them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable taping inside the block (inference / sampling paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, off the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return _f32(g).reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into ``.grad``.

    Gradients are added to whatever is already stored, so successive calls
    without ``zero_grad`` sum (the same tape backpropagated twice doubles
    every gradient exactly).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward_fn is None:
            continue
        for parent, pg in node._backward_fn(g):
            if not parent.requires_grad:
                continue
            pg = _f32(pg)
            acc = flowing.get(id(parent))
            # out-of-place accumulation: closures may hand the same array to
            # several parents, so stored arrays are never mutated
            flowing[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; numpy broadcasting, gradients reduced back."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make(
        data,
        (a, b),
        lambda g: ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    return _make(
        data,
        (a, b),
        lambda g: (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def pow_scalar(a: Tensor, p) -> Tensor:
    """a**p for a Python-number exponent (negative bases need integer p)."""
    p = float(p)
    data = a.data ** np.float32(p)
    return _make(data, (a,), lambda g: ((a, g * p * a.data ** np.float32(p - 1.0)),))


def absolute(a: Tensor) -> Tensor:
    """|a|; subgradient 0 at 0."""
    return _make(np.abs(a.data), (a,), lambda g: ((a, g * np.sign(a.data)),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: ((a, g * data),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    b = _as_tensor(b)
    try:
        data = np.maximum(a.data, b.data)
    except ValueError:
        raise ShapeError("maximum", a.shape, b.shape) from None
    mask = a.data >= b.data

    def back(g):
        return ((a, _unbroadcast(g * mask, a.shape)), (b, _unbroadcast(g * ~mask, b.shape)))

    return _make(data, (a, b), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    b = _as_tensor(b)
    try:
        data = np.minimum(a.data, b.data)
    except ValueError:
        raise ShapeError("minimum", a.shape, b.shape) from None
    mask = a.data <= b.data

    def back(g):
        return ((a, _unbroadcast(g * mask, a.shape)), (b, _unbroadcast(g * ~mask, b.shape)))

    return _make(data, (a, b), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: ((a, g * mask),))


def sigmoid(a: Tensor) -> Tensor:
    data = _f32(1.0 / (1.0 + np.exp(-a.data.astype(np.float64))))
    return _make(data, (a,), lambda g: ((a, g * data * (1.0 - data)),))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: ((a, g * (1.0 - data * data)),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the GPT-2 form)."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    data = _f32(0.5 * x * (1.0 + t))

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return ((a, g * d),)

    return _make(data, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = _f32(a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims))

    def back(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).astype(np.float32)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).astype(np.float32)),)

    return _make(data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    data = _f32(a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims) / n)

    def back(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.shape).astype(np.float32)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / n, a.shape).astype(np.float32)),)

    return _make(data, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strictly 2-D matrix product; accumulates in float64."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    data = _f32(a64 @ b64)

    def back(g):
        g64 = g.astype(np.float64)
        return ((a, _f32(g64 @ b64.T)), (b, _f32(a64.T @ g64)))

    return _make(data, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("bmm", a.shape, b.shape)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    try:
        data = _f32(np.matmul(a64, b64))
    except ValueError:
        raise ShapeError("bmm", a.shape, b.shape) from None

    def back(g):
        g64 = g.astype(np.float64)
        da = np.matmul(g64, b64.swapaxes(-1, -2))
        db = np.matmul(a64.swapaxes(-1, -2), g64)
        return ((a, _unbroadcast(_f32(da), a.shape)), (b, _unbroadcast(_f32(db), b.shape)))

    return _make(data, (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; normalizer accumulated in float64."""
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=axis, keepdims=True)
    data = _f32(y64)

    def back(g):
        gy = g * data
        return ((a, gy - data * gy.sum(axis=axis, keepdims=True)),)

    return _make(data, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    data = _f32(x - lse)

    def back(g):
        p = np.exp(data)
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _make(data, (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis; statistics in float64."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    data = _f32(xhat * gamma.data + beta.data)

    def back(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data
        dx = ivar * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=lead)
        dbeta = g64.sum(axis=lead)
        return ((x, _f32(dx)), (gamma, _f32(dgamma)), (beta, _f32(dbeta)))

    return _make(data, (x, gamma, beta), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax at integer targets.

    ``logits`` is (C,) with a scalar target or (N, C) with an (N,) target
    array; the result is a scalar (mean over the N rows).
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 1:
        lg = logits.data[None, :]
        t = t.reshape(1)
    elif logits.ndim == 2:
        lg = logits.data
        if t.shape != (lg.shape[0],):
            raise ShapeError("cross_entropy", logits.shape, t.shape)
    else:
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    if t.min() < 0 or t.max() >= lg.shape[1]:
        raise ValueError(f"cross_entropy: target out of range for {lg.shape[1]} classes")
    n = lg.shape[0]
    x = lg.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    nll = -(x[np.arange(n), t] - lse[:, 0])
    data = _f32(nll.mean())

    def back(g):
        p = np.exp(x - lse)
        p[np.arange(n), t] -= 1.0
        dl = _f32(p * (float(g) / n))
        return ((logits, dl.reshape(logits.shape)),)

    return _make(data, (logits,), back)


def replace_values(src: Tensor, data) -> Tensor:
    """Forward ``data`` while routing the gradient to ``src`` unchanged.

    The building block of straight-through estimation: values come from a
    non-differentiable path, the gradient is copied across it verbatim.
    ``data`` must match ``src``'s shape.
    """
    arr = _f32(data)
    if arr.shape != src.shape:
        raise ShapeError("replace_values", src.shape, arr.shape)
    return _make(arr, (src,), lambda g: ((src, g),))


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (constant)."""
    m = np.asarray(mask, dtype=bool)
    try:
        data = np.where(m, np.float32(value), x.data)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, m.shape) from None
    if data.shape != x.data.shape:
        raise ShapeError("masked_fill", x.shape, m.shape)
    keep = ~np.broadcast_to(m, x.data.shape)
    return _make(data, (x,), lambda g: ((x, g * keep),))


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(data, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(data, (a,), lambda g: ((a, np.transpose(g, inv)),))


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather along axis 0; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"take_rows: index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def back(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return ((a, da),)

    return _make(data, (a,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table (gather with scatter-add grad)."""
    return take_rows(table, ids)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _make(data, tuple(tensors), back)


# ---------------------------------------------------------------------------
# convolution / resampling (NCHW)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x (B,C,H,W) with w (O,C,kh,kw); float64 accumulation."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).astype(np.float64)
    w2 = w.data.reshape(o, -1).astype(np.float64)
    out = np.matmul(w2[None], cols)  # (B, O, L)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError("conv2d bias", b.shape, (o,))
        out += b.data.astype(np.float64)[None, :, None]
    data = _f32(out.reshape(bsz, o, ho, wo))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(bsz, o, ho * wo).astype(np.float64)
        dw = _f32(np.einsum("bol,bkl->ok", g2, cols)).reshape(w.shape)
        dcols = np.matmul(w2.T[None], g2)  # (B, C*kh*kw, L)
        dcols = dcols.reshape(bsz, c, kh, kw, ho, wo)
        dxp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        dx = _f32(dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, _f32(g2.sum(axis=(0, 2)))))
        return tuple(grads)

    return _make(data, parents, back)


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of (B,C,H,W) by an integer factor."""
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2d", x.shape)
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    bsz, c, h, w = x.shape

    def back(g):
        gg = g.reshape(bsz, c, h, factor, w, factor).sum(axis=(3, 5), dtype=np.float64)
        return ((x, _f32(gg)),)

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# parameter initializers


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)


def normal(rng: np.random.Generator, shape, std: float = 0.02, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=requires_grad)


def uniform(rng: np.random.Generator, shape, lo: float, hi: float, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float32), requires_grad=requires_grad)
