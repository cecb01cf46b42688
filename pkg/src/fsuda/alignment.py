"""Domain alignment losses.

* covariance alignment of per-support-image similarity patterns across domains
* an adversarial domain loss on local descriptors, with a small discriminator
* multi-scale nearest-neighbor matching of target descriptors to support ones
* the identity-shaped covariance regularizer for single-domain training
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx

CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    spa: float = 0.1
    adv: float = 0.05
    msm: float = 0.1
    rspa: float = 0.0

    def __post_init__(self):
        for name in ("spa", "adv", "msm", "rspa"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def covariance(e):
    """Unbiased covariance of a pattern set.

    ``e`` is (n, d) for one set or (S, n, d) for a stack of sets; returns
    (d, d) or (S, d, d).
    """
    e = nx.as_tensor(e)
    n = e.shape[-2]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 patterns, got {n}")
    # shifting by a constant first row keeps identical rows exactly zero
    shifted = e - e.data[..., :1, :]
    centered = shifted - nx.mean(shifted, axis=-2, keepdims=True)
    return nx.matmul(nx.swap_last(centered), centered) * (1.0 / (n - 1))


def _frobenius_sq(m):
    return nx.tsum(m * m, axis=(-2, -1))


def spa_loss(source_sets, target_sets):
    """Mean squared Frobenius distance between paired source/target covariances.

    Both arguments are (NK, n, HW) stacks; set i of each domain belongs to
    support image i.
    """
    s, t = nx.as_tensor(source_sets), nx.as_tensor(target_sets)
    if s.ndim != 3 or t.ndim != 3 or s.shape[0] != t.shape[0] or s.shape[2] != t.shape[2]:
        raise ValueError(f"unpaired pattern sets: {s.shape} vs {t.shape}")
    return nx.mean(_frobenius_sq(covariance(s) - covariance(t)))


def rspa_loss(sets):
    """Mean squared distance of each covariance to trace(cov)/HW times the identity."""
    e = nx.as_tensor(sets)
    if e.ndim == 2:
        e = nx.reshape(e, (1,) + e.shape)
    cov = covariance(e)
    d = cov.shape[-1]
    eye = np.eye(d, dtype=cov.dtype)
    trace = nx.tsum(cov * eye, axis=(-2, -1), keepdims=True)
    return nx.mean(_frobenius_sq(cov - trace * (eye / d)))


class Discriminator:
    """Three fully-connected layers C -> C/2 -> C/4 -> 1, ReLU between, sigmoid out."""

    def __init__(self, channels, seed=0):
        if channels < 4:
            raise ValueError("discriminator needs at least 4 input channels")
        rng = np.random.default_rng([seed, 0xD])
        widths = [channels, channels // 2, channels // 4, 1]
        dtype = nx.get_dtype()
        self.params = nx.ParamTape()
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(a)
            self.params.register(f"disc.fc{i}.weight", nx.Tensor(rng.uniform(-bound, bound, size=(a, b)), dtype=dtype))
            self.params.register(f"disc.fc{i}.bias", nx.Tensor(rng.uniform(-bound, bound, size=b), dtype=dtype))

    def __call__(self, lds, reverse=False):
        """Probability that each descriptor row is from the target domain.

        With ``reverse`` the discriminator's own parameters enter through a
        gradient-reversal node, so one descent step on a loss that contains
        this output ascends it in the discriminator.
        """
        p = self.params
        weights = [p[f"disc.fc{i}.weight"] for i in range(3)]
        biases = [p[f"disc.fc{i}.bias"] for i in range(3)]
        if reverse:
            weights = [nx.grad_reverse(w) for w in weights]
            biases = [nx.grad_reverse(b) for b in biases]
        x = nx.as_tensor(lds)
        for i in range(3):
            x = nx.matmul(x, weights[i]) + biases[i]
            if i < 2:
                x = nx.relu(x)
        prob = nx.sigmoid(x)
        return nx.reshape(nx.clip(prob, CLAMP, 1 - CLAMP), x.shape[:-1])

    def named_arrays(self):
        return [(n, t.data) for n, t in self.params.items()]

    def load_arrays(self, arrays, strict=True):
        for name, t in self.params.items():
            if name in arrays:
                if arrays[name].shape != t.shape:
                    raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
                t.data = np.array(arrays[name], dtype=t.dtype)
            elif strict:
                raise KeyError(f"checkpoint has no parameter {name!r}")


def adv_loss(source_lds, target_lds, disc, reverse=False):
    """E_src[log(1 - D(l))] + E_tgt[log D(l)] over descriptor rows (M, C).

    The embedding minimizes this and the discriminator maximizes it. Passing
    ``reverse=True`` realizes both in a single descent step: the embedding
    gets the ordinary gradient, the discriminator its negation.
    """
    src, tgt = nx.as_tensor(source_lds), nx.as_tensor(target_lds)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("adversarial loss needs descriptors from both domains")
    d_src = disc(src, reverse=reverse)
    d_tgt = disc(tgt, reverse=reverse)
    return nx.mean(nx.log(1.0 - d_src)) + nx.mean(nx.log(d_tgt))


def neighbor_similarities(target_lds, support_multiscale, n):
    """Cosine similarities of each target row to its n nearest support descriptors.

    Returns a (rows, n) tensor sorted descending; the neighbor choice is a
    hard selection with ties broken by lower support index.
    """
    sims = nx.matmul(nx.l2_normalize_rows(target_lds), nx.swap_last(nx.l2_normalize_rows(support_multiscale)))
    idx = kernels.topk_indices(sims.data, n)
    rows = np.arange(sims.shape[0])[:, None]
    return nx.getitem(sims, (rows, idx))


def msm_loss(target_lds, support_multiscale, k=3, n=10):
    """Multi-scale matching: pull each target descriptor toward its top-k support neighbors.

    ``target_lds`` is (T, HW, C) for T target queries; ``support_multiscale``
    is the (30*N*K, C) pooled support set. Per descriptor the contribution is
    ``-sum_{i<=k} log softmax_n(m)_i`` over its n most similar neighbors; the
    total is divided by T.
    """
    t = nx.as_tensor(target_lds)
    s = nx.as_tensor(support_multiscale)
    if k <= 1:
        raise ValueError("msm needs k > 1 pushed neighbors")
    if not (k <= n <= s.shape[0]):
        raise ValueError(f"msm needs k <= n <= {s.shape[0]} support descriptors, got k={k}, n={n}")
    if t.ndim == 2:
        t = nx.reshape(t, (1,) + t.shape)
    T = t.shape[0]
    flat = nx.reshape(t, (-1, t.shape[-1]))
    m = neighbor_similarities(flat, s, n)
    logp = nx.log_softmax(m, axis=-1)
    return -nx.tsum(logp[:, :k]) * (1.0 / T)
