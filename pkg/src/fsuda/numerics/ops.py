"""Differentiable primitives.

Each op computes its forward value with numpy and attaches a closure that
maps the output gradient to one gradient per parent (``None`` when a parent
is a constant). Broadcasting is limited to what numpy does for elementwise
ops and batched matmul; gradients are summed back to the input shape.
"""

import numpy as np

from .. import kernels
from . import tensor as _t
from .tensor import Tensor, as_tensor


class NonFiniteError(FloatingPointError):
    pass


def _node(data, parents, backward):
    # verification mode checks the finiteness invariant after every op
    if _t._default_dtype is np.float64 and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced a non-finite value")
    return Tensor._make(data, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), _filter(backward, a, b))


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), _filter(backward, a, b))


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), _filter(backward, a, b))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), _filter(backward, a, b))


def power(x, exponent):
    x = as_tensor(x)
    e = float(exponent)

    def backward(g):
        return (g * e * x.data ** (e - 1),)

    return _node(x.data ** e, (x,), backward)


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    """max(0, x); the derivative at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1 - out),))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def grad_reverse(x, scale=1.0):
    """Identity on the forward pass; multiplies the incoming gradient by ``-scale``."""
    return _node(x.data, (x,), lambda g: (-scale * g,))


def _filter(backward, *parents):
    # skip gradients for constant parents while keeping positional alignment
    def wrapped(g):
        grads = backward(g)
        return tuple(gr for p, gr in zip(parents, grads) if p.requires_grad)

    return wrapped


# -- reductions and shape --------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p for t, p in zip(tensors, parts) if t.requires_grad)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Product over the last two axes; leading axes broadcast as in numpy."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents disagree: {a.shape} has {a.shape[-1]} columns, "
            f"{b.shape} has {b.shape[-2]} rows")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), _filter(backward, a, b))


def linear_map(matrix, x):
    """Apply a constant matrix along axis -2 of ``x``: ``matrix @ x``."""
    m = np.asarray(matrix, dtype=x.dtype)
    return _node(m @ x.data, (x,), lambda g: (_unbroadcast(m.T @ g, x.shape),))


def l2_normalize_rows(m, eps=1e-12):
    """Divide each row (last axis) by max(||row||, eps); zero rows stay zero."""
    norm = np.sqrt((m.data * m.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = m.data / denom
    guarded = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(guarded, (g - out * proj) / denom, g / denom),)

    return _node(out, (m,), backward)


def logsumexp(x, axis=-1, keepdims=False):
    mx = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - mx)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + mx
    soft = shifted / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def log_softmax(x, axis=-1):
    mx = x.data.max(axis=axis, keepdims=True)
    z = x.data - mx
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward)


# -- convolution and pooling ----------------------------------------------

def _batched(x, rank):
    if x.ndim == rank - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ValueError(f"expected a rank-{rank - 1} or rank-{rank} tensor, got shape {x.shape}")
    return x, False


def conv2d(x, w, stride=1, padding=0):
    """Zero-padded cross-correlation of ``x`` (H,W,Cin or B,H,W,Cin) with ``w`` (kh,kw,Cin,Cout)."""
    if stride < 1:
        raise ValueError("conv2d stride must be at least 1")
    x, single = _batched(as_tensor(x), 4)
    w = as_tensor(w)
    B, H, W, Cin = x.shape
    kh, kw, wc, Cout = w.shape
    if wc != Cin:
        raise ValueError(f"conv2d channel mismatch: input has {Cin}, kernel expects {wc}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    Ho, Wo = cols.shape[1], cols.shape[2]
    flat = cols.reshape(B * Ho * Wo, kh * kw * Cin)
    wmat = w.data.reshape(kh * kw * Cin, Cout)
    out = (flat @ wmat).reshape(B, Ho, Wo, Cout)

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, Cout)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, Cin)
            gx = kernels.col2im(dcols, H, W, stride, padding)
        if w.requires_grad:
            gw = (flat.T @ g2).reshape(w.shape)
        return gx, gw

    y = _node(out, (x, w), _filter(backward, x, w))
    return reshape(y, y.shape[1:]) if single else y


def _window_matrix(H, W, window, stride, ceil_mode):
    Ho = kernels.pool_extent(H, window, stride, ceil_mode)
    Wo = kernels.pool_extent(W, window, stride, ceil_mode)
    A = np.zeros((Ho * Wo, H * W))
    for i in range(Ho):
        y0, y1 = i * stride, min(i * stride + window, H)
        for j in range(Wo):
            x0, x1 = j * stride, min(j * stride + window, W)
            cells = [y * W + xx for y in range(y0, y1) for xx in range(x0, x1)]
            A[i * Wo + j, cells] = 1.0 / len(cells)
    return A, Ho, Wo


def _maxpool(x, window, stride, ceil_mode):
    B, H, W, D = x.shape
    out, idx = kernels.maxpool_forward(x.data, window, stride, ceil_mode)
    return _node(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, H, W),))


def pool2d(x, mode="max", window=2, stride=2, ceil_mode=False):
    """Max or average pooling over the two leading spatial axes of (B,)H,W,D.

    In ceil mode a ragged final window covers leftover rows/columns; average
    pooling divides by the number of cells actually inside each window.
    """
    if window < 1 or stride < 1:
        raise ValueError("pool window and stride must be at least 1")
    x, single = _batched(as_tensor(x), 4)
    if mode == "max":
        y = _maxpool(x, window, stride, ceil_mode)
    elif mode == "avg":
        B, H, W, D = x.shape
        A, Ho, Wo = _window_matrix(H, W, window, stride, ceil_mode)
        y = reshape(linear_map(A, reshape(x, (B, H * W, D))), (B, Ho, Wo, D))
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return reshape(y, y.shape[1:]) if single else y


def adaptive_windows(n, out):
    """Bounds of ``out`` contiguous windows partitioning ``range(n)`` as evenly as possible."""
    edges = [len(part) for part in np.array_split(np.arange(n), out)]
    bounds, start = [], 0
    for size in edges:
        bounds.append((start, start + size))
        start += size
    return bounds


def adaptive_pool_matrix(H, W, out_h, out_w):
    A = np.zeros((out_h * out_w, H * W))
    for i, (y0, y1) in enumerate(adaptive_windows(H, out_h)):
        for j, (x0, x1) in enumerate(adaptive_windows(W, out_w)):
            cells = [y * W + xx for y in range(y0, y1) for xx in range(x0, x1)]
            A[i * out_w + j, cells] = 1.0 / len(cells)
    return A


def adaptive_avg_pool2d(x, out_h, out_w):
    x, single = _batched(as_tensor(x), 4)
    B, H, W, D = x.shape
    if out_h > H or out_w > W:
        raise ValueError(f"cannot adaptively pool {H}x{W} to a larger {out_h}x{out_w} grid")
    A = adaptive_pool_matrix(H, W, out_h, out_w)
    y = reshape(linear_map(A, reshape(x, (B, H * W, D))), (B, out_h, out_w, D))
    return reshape(y, y.shape[1:]) if single else y
