# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loop kernels. Semantics mirror ``fsuda.kernels.fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memset

cnp.import_array()

ctypedef fused real:
    float
    double


def pool_extent(Py_ssize_t n, Py_ssize_t window, Py_ssize_t stride, bint ceil_mode):
    cdef Py_ssize_t out
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


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, Ho, Wo, kh, kw, C), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, di, dj, c, y, xx
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for di in range(kh):
                    y = i * stride + di - pad
                    if y < 0 or y >= H:
                        continue
                    for dj in range(kw):
                        xx = j * stride + dj - pad
                        if xx < 0 or xx >= W:
                            continue
                        for c in range(C):
                            out[b, i, j, di, dj, c] = x[b, y, xx, c]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], C = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, di, dj, c, y, xx
    # same (di, dj) visiting order as the fallback so float sums agree
    for b in range(B):
        for di in range(kh):
            for dj in range(kw):
                for i in range(Ho):
                    y = i * stride + di - pad
                    if y < 0 or y >= H:
                        continue
                    for j in range(Wo):
                        xx = j * stride + dj - pad
                        if xx < 0 or xx >= W:
                            continue
                        for c in range(C):
                            dx[b, y, xx, c] += cols[b, i, j, di, dj, c]
    return dx_arr


def maxpool_forward(real[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride,
                    bint ceil_mode):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3]
    cdef Py_ssize_t Ho = pool_extent(H, window, stride, ceil_mode)
    cdef Py_ssize_t Wo = pool_extent(W, window, stride, ceil_mode)
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, Ho, Wo, D), dtype=dtype)
    idx_arr = np.empty((B, Ho, Wo, D), dtype=np.intp)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, i, j, d, y, xx, y0, y1, x0, x1, best_i
    cdef real best, v
    for b in range(B):
        for i in range(Ho):
            y0 = i * stride
            y1 = min(y0 + window, H)
            for j in range(Wo):
                x0 = j * stride
                x1 = min(x0 + window, W)
                for d in range(D):
                    best = x[b, y0, x0, d]
                    best_i = y0 * W + x0
                    for y in range(y0, y1):
                        for xx in range(x0, x1):
                            v = x[b, y, xx, d]
                            if v > best:
                                best = v
                                best_i = y * W + xx
                    out[b, i, j, d] = best
                    idx[b, i, j, d] = best_i
    return out_arr, idx_arr


def maxpool_backward(real[:, :, :, ::1] dout, Py_ssize_t[:, :, :, ::1] idx,
                     Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = dout.shape[0], Ho = dout.shape[1], Wo = dout.shape[2]
    cdef Py_ssize_t D = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((B, H, W, D), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, d, flat
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for d in range(D):
                    flat = idx[b, i, j, d]
                    dx[b, flat // W, flat % W, d] += dout[b, i, j, d]
    return dx_arr


def topk_indices(real[:, ::1] m, Py_ssize_t k):
    """Per row, indices of the k largest values in descending order.

    Ties go to the lowest column index.
    """
    cdef Py_ssize_t R = m.shape[0], n = m.shape[1]
    if k > n:
        k = n
    out_arr = np.empty((R, k), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] out = out_arr
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    cdef Py_ssize_t r, t, j, best_j
    cdef real best, v
    for r in range(R):
        memset(&taken[0], 0, n)
        for t in range(k):
            best_j = -1
            for j in range(n):
                if taken[j]:
                    continue
                v = m[r, j]
                if best_j < 0 or v > best:
                    best = v
                    best_j = j
            taken[best_j] = 1
            out[r, t] = best_j
    return out_arr
