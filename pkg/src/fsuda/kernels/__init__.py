"""Hot loop kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports; set ``FSUDA_KERNELS=python``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import fallback

_impl = fallback
BACKEND = "python"
if os.environ.get("FSUDA_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = fallback


def _c(a):
    return np.ascontiguousarray(a)


def pool_extent(n, window, stride, ceil_mode):
    return fallback.pool_extent(n, window, stride, ceil_mode)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, H, W, stride, pad):
    return _impl.col2im(_c(cols), H, W, stride, pad)


def maxpool_forward(x, window, stride, ceil_mode):
    return _impl.maxpool_forward(_c(x), window, stride, bool(ceil_mode))


def maxpool_backward(dout, idx, H, W):
    return _impl.maxpool_backward(_c(dout), _c(idx), H, W)


def topk_indices(m, k):
    return _impl.topk_indices(_c(m), k)


def topk_mask(m, k):
    """Boolean mask keeping the k largest entries per row of a 2-D array."""
    idx = topk_indices(m, k)
    mask = np.zeros(m.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask
