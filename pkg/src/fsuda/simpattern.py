"""Similarity-pattern encoding and the pattern-sum classifier.

For a query image and a support class the pipeline is: cosine similarity
between every query descriptor and every class descriptor, keep the top-k
entries of each row, lay the rows back out on the query's HxW grid, smooth
each column's plane with a renormalized 3x3 Gaussian, 2x2/2 ceil max-pool,
and sum the pooled cells. The result has one entry per class descriptor.
"""

from functools import lru_cache

import numpy as np

from . import kernels
from . import numerics as nx

SIGMA = 0.8
DEFAULT_TOPK = 3


def pooled_cells(H, W):
    return kernels.pool_extent(H, 2, 2, True) * kernels.pool_extent(W, 2, 2, True)


def gaussian_weights(sigma=SIGMA):
    """Unnormalized 3x3 weights exp(-(dx^2+dy^2) / (2 sigma^2)), indexed [dy+1, dx+1]."""
    d = np.arange(-1, 2)
    return np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma ** 2))


@lru_cache(maxsize=64)
def smoothing_matrix(H, W, sigma=SIGMA):
    """(HW,HW) matrix applying the 3x3 Gaussian with border renormalization.

    Row i holds the in-bounds kernel weights around position i divided by
    their sum, so constant planes are fixed points.
    """
    g = gaussian_weights(sigma)
    S = np.zeros((H * W, H * W))
    for y in range(H):
        for x in range(W):
            row = y * W + x
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W:
                        S[row, yy * W + xx] = g[dy + 1, dx + 1]
            S[row] /= S[row].sum()
    S.setflags(write=False)
    return S


def cosine_matrix(q, s):
    """Cosine similarities between rows of ``q`` (..., R, C) and ``s`` (..., S, C)."""
    q, s = nx.as_tensor(q), nx.as_tensor(s)
    if q.shape[-1] != s.shape[-1]:
        raise ValueError(f"descriptor length mismatch: {q.shape[-1]} vs {s.shape[-1]}")
    return nx.matmul(nx.l2_normalize_rows(q), nx.swap_last(nx.l2_normalize_rows(s)))


def topk_sparsify(m, k=DEFAULT_TOPK):
    """Zero all but the k largest entries of each row (last axis); ties keep the lower index.

    The mask is a constant gate, so dropped entries receive no gradient.
    """
    if k < 1:
        raise ValueError("top-k needs k >= 1")
    m = nx.as_tensor(m)
    n = m.shape[-1]
    if k >= n:
        return m
    mask = kernels.topk_mask(m.data.reshape(-1, n), k).reshape(m.shape)
    return m * mask.astype(m.dtype)


def encode_pattern(m, H, W, sigma=SIGMA):
    """Similarity pattern from a (sparsified) similarity matrix (..., HW, S) -> (..., S)."""
    m = nx.as_tensor(m)
    if m.ndim < 2 or m.shape[-2] != H * W:
        raise ValueError(f"similarity matrix has {m.shape[-2] if m.ndim >= 2 else '?'} rows, expected H*W = {H * W}")
    lead, S = m.shape[:-2], m.shape[-1]
    smoothed = nx.linear_map(smoothing_matrix(H, W, sigma), m)
    vol = nx.reshape(smoothed, (-1, H, W, S))
    pooled = nx.pool2d(vol, "max", 2, 2, ceil_mode=True)
    return nx.reshape(nx.tsum(pooled, axis=(1, 2)), lead + (S,))


def similarity_patterns(query_lds, support_lds, H, W, k=DEFAULT_TOPK):
    """Image-to-class patterns for a batch of queries.

    query_lds: (B, HW, C); support_lds: (N, KHW, C) per class.
    Returns (B, N, KHW).
    """
    q = nx.as_tensor(query_lds)
    s = nx.as_tensor(support_lds)
    B = q.shape[0]
    q4 = nx.reshape(q, (B, 1) + q.shape[1:])
    m = cosine_matrix(q4, s)  # (B, N, HW, KHW)
    return encode_pattern(topk_sparsify(m, k), H, W)


def image_patterns(patterns, k_shot):
    """Split class patterns (B, N, K*HW) into per-support-image patterns (N*K, B, HW)."""
    B, N, L = patterns.shape
    hw = L // k_shot
    per_image = nx.reshape(patterns, (B, N * k_shot, hw))
    return nx.transpose(per_image, (1, 0, 2))


def class_score(p):
    """Image-to-class score: the sum of the pattern's entries (last axis)."""
    return nx.tsum(nx.as_tensor(p), axis=-1)


def cls_loss(scores, labels):
    """Mean cross-entropy of labeled queries; ``labels`` are 0-based class indices."""
    scores = nx.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = scores.shape[-1]
    if labels.size == 0:
        raise ValueError("cls_loss needs at least one labeled query")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    logp = nx.log_softmax(scores, axis=-1)
    return -nx.mean(logp[np.arange(labels.size), labels])


def predict(scores):
    """Argmax over classes; ties resolve to the lowest class index."""
    data = scores.data if isinstance(scores, nx.Tensor) else np.asarray(scores)
    return np.argmax(data, axis=-1)


def classify(query_maps, support_maps, n_way, k_shot, k=DEFAULT_TOPK):
    """Predicted class index for each query feature map (B,H,W,C)."""
    from .embedding import class_lds, extract_lds

    qm = nx.as_tensor(query_maps)
    if qm.ndim == 3:
        qm = nx.reshape(qm, (1,) + qm.shape)
    H, W = qm.shape[1:3]
    pats = similarity_patterns(extract_lds(qm), class_lds(support_maps, n_way, k_shot), H, W, k)
    return predict(class_score(pats))
