"""Pure-numpy versions of the compiled kernels.

Every function here returns exactly what its counterpart in ``_ckernels``
returns (same dtypes, same tie rules, same summation order).
"""

import numpy as np


def pool_extent(n, window, stride, ceil_mode):
    if n >= window:
        if ceil_mode:
            out = (n - window + stride - 1) // stride + 1
        else:
            out = (n - window) // stride + 1
    else:
        out = 1 if ceil_mode else 0
    if ceil_mode and out > 1 and (out - 1) * stride >= n:
        out -= 1
    return out


def im2col(x, kh, kw, stride, pad):
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, :, di, dj, :] = x[:, di:di + stride * (Ho - 1) + 1:stride,
                                        dj:dj + stride * (Wo - 1) + 1:stride, :]
    return out


def col2im(cols, H, W, stride, pad):
    B, Ho, Wo, kh, kw, C = cols.shape
    dx = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            dx[:, di:di + stride * (Ho - 1) + 1:stride,
               dj:dj + stride * (Wo - 1) + 1:stride, :] += cols[:, :, :, di, dj, :]
    if pad:
        dx = dx[:, pad:pad + H, pad:pad + W, :]
    return np.ascontiguousarray(dx)


def maxpool_forward(x, window, stride, ceil_mode):
    B, H, W, D = x.shape
    Ho = pool_extent(H, window, stride, ceil_mode)
    Wo = pool_extent(W, window, stride, ceil_mode)
    Hp = (Ho - 1) * stride + window
    Wp = (Wo - 1) * stride + window
    padded = np.full((B, max(Hp, H), max(Wp, W), D), -np.inf, dtype=x.dtype)
    padded[:, :H, :W, :] = x
    flat = np.arange(padded.shape[1] * padded.shape[2]).reshape(padded.shape[1:3])
    best = None
    best_idx = None
    for di in range(window):
        for dj in range(window):
            ys = slice(di, di + stride * (Ho - 1) + 1, stride)
            xs = slice(dj, dj + stride * (Wo - 1) + 1, stride)
            v = padded[:, ys, xs, :]
            # positions as (y, x) in the unpadded plane
            pos = flat[ys, xs]
            pos = (pos // padded.shape[2]) * W + pos % padded.shape[2]
            if best is None:
                best = v.copy()
                best_idx = np.broadcast_to(pos[None, :, :, None], v.shape).copy()
            else:
                better = v > best
                best = np.where(better, v, best)
                best_idx = np.where(better, pos[None, :, :, None], best_idx)
    return np.ascontiguousarray(best), np.ascontiguousarray(best_idx, dtype=np.intp)


def maxpool_backward(dout, idx, H, W):
    B, Ho, Wo, D = dout.shape
    dx = np.zeros((B, H * W, D), dtype=dout.dtype)
    b = np.arange(B)[:, None, None, None]
    d = np.arange(D)[None, None, None, :]
    np.add.at(dx, (np.broadcast_to(b, idx.shape), idx, np.broadcast_to(d, idx.shape)), dout)
    return dx.reshape(B, H, W, D)


def topk_indices(m, k):
    """Per row, indices of the k largest values in descending order.

    Ties go to the lowest column index.
    """
    k = min(k, m.shape[1])
    order = np.argsort(-m, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k], dtype=np.intp)
