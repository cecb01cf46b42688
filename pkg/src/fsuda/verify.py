"""Reference oracles and the verification suites behind ``gradcheck``/``selftest``.

The oracles are deliberately naive (explicit Python loops, no shared code
with the vectorized paths) so they can be used to check them.
"""

import math

import numpy as np

from . import numerics as nx
from .alignment import Discriminator, adv_loss, covariance, msm_loss, rspa_loss, spa_loss
from .embedding import EmbeddingConfig, EmbeddingNet, embed, multiscale_lds
from .episodic import Episode, ObjectiveConfig, total_objective
from .alignment import LossWeights
from .simpattern import (
    SIGMA,
    class_score,
    cls_loss,
    cosine_matrix,
    encode_pattern,
    similarity_patterns,
    topk_sparsify,
)

# -- naive oracles ---------------------------------------------------------


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, stride=1, padding=0):
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((Ho, Wo, Cout))
    for i in range(Ho):
        for j in range(Wo):
            for o in range(Cout):
                s = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        y, xx = i * stride + di - padding, j * stride + dj - padding
                        if 0 <= y < H and 0 <= xx < W:
                            for c in range(Cin):
                                s += x[y, xx, c] * w[di, dj, c, o]
                out[i, j, o] = s
    return out


def naive_cosine(q, s):
    out = np.zeros((len(q), len(s)))
    for i in range(len(q)):
        for j in range(len(s)):
            dot = sum(q[i, c] * s[j, c] for c in range(q.shape[1]))
            nq = max(math.sqrt(sum(v * v for v in q[i])), 1e-12)
            ns = max(math.sqrt(sum(v * v for v in s[j])), 1e-12)
            out[i, j] = dot / (nq * ns)
    return out


def naive_topk(m, k):
    out = np.zeros_like(m)
    for i in range(m.shape[0]):
        ranked = sorted(range(m.shape[1]), key=lambda j: (-m[i, j], j))
        for j in ranked[:k]:
            out[i, j] = m[i, j]
    return out


def naive_encode(m, H, W, sigma=SIGMA):
    """Reshape, renormalized Gaussian smoothing, 2x2/2 ceil max-pool, sum."""
    cols = m.shape[1]
    vol = np.zeros((H, W, cols))
    for r in range(H * W):
        vol[r // W, r % W, :] = m[r]
    smooth = np.zeros_like(vol)
    for y in range(H):
        for x in range(W):
            for j in range(cols):
                acc = wsum = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if 0 <= y + dy < H and 0 <= x + dx < W:
                            wt = math.exp(-(dy * dy + dx * dx) / (2 * sigma * sigma))
                            acc += wt * vol[y + dy, x + dx, j]
                            wsum += wt
                smooth[y, x, j] = acc / wsum
    pattern = np.zeros(cols)
    for y0 in range(0, H, 2):
        for x0 in range(0, W, 2):
            for j in range(cols):
                best = -math.inf
                for y in range(y0, min(y0 + 2, H)):
                    for x in range(x0, min(x0 + 2, W)):
                        best = max(best, smooth[y, x, j])
                pattern[j] += best
    return pattern


def naive_pattern(q, s, H, W, k):
    return naive_encode(naive_topk(naive_cosine(q, s), k), H, W)


def naive_covariance(patterns):
    n, d = patterns.shape
    mean = [sum(patterns[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for i in range(n):
        for a in range(d):
            for b in range(d):
                cov[a, b] += (patterns[i, a] - mean[a]) * (patterns[i, b] - mean[b])
    return cov / (n - 1)


def naive_spa(src_sets, tgt_sets):
    total = 0.0
    for s, t in zip(src_sets, tgt_sets):
        diff = naive_covariance(s) - naive_covariance(t)
        total += sum(v * v for v in diff.ravel())
    return total / len(src_sets)


def naive_rspa(sets):
    total = 0.0
    for e in sets:
        cov = naive_covariance(e)
        d = cov.shape[0]
        lam = sum(cov[i, i] for i in range(d)) / d
        total += sum((cov[a, b] - (lam if a == b else 0.0)) ** 2 for a in range(d) for b in range(d))
    return total / len(sets)


def naive_cross_entropy(scores, labels):
    total = 0.0
    for row, y in zip(scores, labels):
        z = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[y]) / z)
    return total / len(labels)


def naive_msm(target_lds, support, k, n):
    T = len(target_lds)
    total = 0.0
    for q in target_lds:
        sims = naive_cosine(q, support)
        for row in sims:
            ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))[:n]
            m = [row[j] for j in ranked]
            z = sum(math.exp(v) for v in m)
            total += -sum(math.log(math.exp(m[i]) / z) for i in range(k))
    return total / T


def naive_adv(src, tgt, prob):
    ls = [math.log(1 - min(max(prob(l), 1e-7), 1 - 1e-7)) for l in src]
    lt = [math.log(min(max(prob(l), 1e-7), 1 - 1e-7)) for l in tgt]
    return sum(ls) / len(ls) + sum(lt) / len(lt)


# -- micro instances -------------------------------------------------------


def micro_net(H=3, C=4, seed=0, in_channels=1):
    cfg = EmbeddingConfig(height=H + 2, width=H + 2, channels_in=in_channels, blocks=1,
                          channels=C, pooled_blocks=0, seed=seed)
    return EmbeddingNet(cfg)


def micro_episode(rng, H=5, n_way=2, k_shot=1, n_query=2, n_target=4):
    side = H + 2
    img = lambda n: rng.uniform(0, 1, size=(n, side, side))  # noqa: E731
    return Episode(
        classes=np.arange(n_way),
        support=img(n_way * k_shot),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        source_query=img(n_way * n_query),
        source_labels=np.repeat(np.arange(n_way), n_query),
        target_query=img(n_target),
        target_labels=None,
    )


def _params(*tapes):
    return [p for tape in tapes for p in tape]


def _leaf(rng, *shape):
    return nx.Tensor(rng.normal(size=shape), requires_grad=True)


# -- suites ----------------------------------------------------------------

STEP = 1e-6


def gradcheck_cases(seed, step=STEP):
    """Yield (name, max relative error) for every differentiable piece on one micro-instance.

    Must be called in 64-bit mode. Piecewise-linear gates (top-k, max-pool,
    neighbor choice) make larger steps straddle kinks, hence the small step.
    """
    rng = np.random.default_rng([seed, 0xC4EC])
    H, C = 3, 4
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    yield "matmul", nx.gradient_check(lambda: (nx.matmul(a, b) ** 2).sum(), [a, b], step)
    x, w = _leaf(rng, 2, 5, 5, 2), _leaf(rng, 3, 3, 2, 3)
    yield "conv2d", nx.gradient_check(lambda: (nx.conv2d(x, w, 1, 1) ** 2).sum(), [x, w], step)
    r = _leaf(rng, 4, 5)
    yield "relu", nx.gradient_check(lambda: (nx.relu(r) ** 2).sum(), [r], step)
    pm = _leaf(rng, 5, 5, 3)
    yield "pool2d.max", nx.gradient_check(lambda: (nx.pool2d(pm, "max", 2, 2, True) ** 2).sum(), [pm], step)
    yield "pool2d.avg", nx.gradient_check(lambda: (nx.pool2d(pm, "avg", 2, 2, True) ** 2).sum(), [pm], step)
    yield "adaptive_avg", nx.gradient_check(lambda: (nx.adaptive_avg_pool2d(pm, 2, 2) ** 2).sum(), [pm], step)
    weights = nx.Tensor(rng.normal(size=(4, 5)))
    yield "l2_normalize_rows", nx.gradient_check(lambda: (nx.l2_normalize_rows(r) * weights).sum(), [r], step)

    net = micro_net(H, C, seed)
    imgs = rng.uniform(size=(2, H + 2, H + 2))
    proj = nx.Tensor(rng.normal(size=(2, H, H, C)))
    yield "embed", nx.gradient_check(lambda: (embed(imgs, net) * proj).sum(), list(net.params), step)

    q, s = _leaf(rng, H * H, C), _leaf(rng, H * H, C)
    yield "cosine_matrix", nx.gradient_check(lambda: (cosine_matrix(q, s) * nx.Tensor(np.arange(81).reshape(9, 9) / 81)).sum(), [q, s], step)
    yield "encode_pattern", nx.gradient_check(
        lambda: (encode_pattern(topk_sparsify(cosine_matrix(q, s), 3), H, H) ** 2).sum(), [q, s], step)

    scores = _leaf(rng, 4, 2)
    labels = np.array([0, 1, 1, 0])
    yield "cls_loss", nx.gradient_check(lambda: cls_loss(scores, labels), [scores], step)
    ql, sl = _leaf(rng, 4, H * H, C), _leaf(rng, 2, H * H, C)
    yield "cls_loss.patterns", nx.gradient_check(
        lambda: cls_loss(class_score(similarity_patterns(ql, sl, H, H, 3)), labels), [ql, sl], step)

    es, et = _leaf(rng, 2, 4, H * H), _leaf(rng, 2, 5, H * H)
    yield "covariance", nx.gradient_check(lambda: (covariance(es) ** 2).sum(), [es], step)
    yield "spa_loss", nx.gradient_check(lambda: spa_loss(es, et), [es, et], step)
    yield "rspa_loss", nx.gradient_check(lambda: rspa_loss(es), [es], step)

    disc = Discriminator(C, seed=seed)
    src, tgt = _leaf(rng, 6, C), _leaf(rng, 5, C)
    yield "adv_loss", nx.gradient_check(lambda: adv_loss(src, tgt, disc), [src, tgt] + list(disc.params), step)

    tl = _leaf(rng, 3, 25, C)
    sup = _leaf(rng, 1, 5, 5, C)
    yield "msm_loss", nx.gradient_check(lambda: msm_loss(tl, multiscale_lds(sup), 3, 10), [tl, sup], step)

    net5 = micro_net(5, C, seed)
    disc5 = Discriminator(C, seed=seed)
    ep = micro_episode(rng, H=5)
    cfg = ObjectiveConfig(LossWeights(spa=0.1, adv=0.05, msm=0.1, rspa=0.1), topk=3, msm_k=3, msm_n=10, reverse=False)
    yield "total_objective", nx.gradient_check(
        lambda: total_objective(ep, net5, disc5, cfg)[0], _params(net5.params, disc5.params), step)


def gradcheck_suite(instances=20, step=STEP, log=None):
    """Worst error per check name over ``instances`` seeds."""
    worst = {}
    with nx.precision("float64"):
        for seed in range(instances):
            for name, err in gradcheck_cases(seed, step):
                worst[name] = max(worst.get(name, 0.0), err)
                if log:
                    log(seed, name, err)
    return worst


def selftest_cases(seed):
    """Yield (name, max abs deviation from oracle) for one random instance."""
    rng = np.random.default_rng([seed, 0x5E1F])
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    yield "matmul", float(np.abs(nx.matmul(nx.Tensor(a), nx.Tensor(b)).data - naive_matmul(a, b)).max())
    H, W = rng.integers(3, 7, size=2)
    x, w = rng.normal(size=(H, W, 2)), rng.normal(size=(2, 2, 2, 3))
    yield "conv2d", float(np.abs(nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data - naive_conv2d(x, w)).max())
    C = int(rng.integers(2, 6))
    K = int(rng.integers(1, 3))
    q, s = rng.normal(size=(H * W, C)), rng.normal(size=(K * H * W, C))
    k = int(rng.integers(1, 5))
    fast = similarity_patterns(nx.Tensor(q[None]), nx.Tensor(s[None]), int(H), int(W), k).data[0, 0]
    yield "encode_pattern", float(np.abs(fast - naive_pattern(q, s, H, W, k)).max())
    const = float(rng.uniform(-1, 1))
    P = math.ceil(H / 2) * math.ceil(W / 2)
    pat = encode_pattern(nx.Tensor(np.full((H * W, 3), const)), int(H), int(W)).data
    yield "constant_fixed_point", float(np.abs(pat - P * const).max())
    e = rng.normal(size=(10, 4))
    yield "covariance", float(np.abs(covariance(nx.Tensor(e)).data - naive_covariance(e)).max())
    es, et = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 6, 4))
    yield "spa_loss", abs(spa_loss(nx.Tensor(es), nx.Tensor(et)).item() - naive_spa(es, et))
    yield "rspa_loss", abs(rspa_loss(nx.Tensor(es)).item() - naive_rspa(es))
    scores, labels = rng.normal(size=(6, 4)), rng.integers(0, 4, size=6)
    yield "cls_loss", abs(cls_loss(nx.Tensor(scores), labels).item() - naive_cross_entropy(scores, labels))
    tl, sup = rng.normal(size=(2, 6, 3)), rng.normal(size=(12, 3))
    yield "msm_loss", abs(msm_loss(nx.Tensor(tl), nx.Tensor(sup), 2, 5).item() - naive_msm(tl, sup, 2, 5))


def selftest_suite(trials=100, log=None):
    worst = {}
    with nx.precision("float64"):
        for seed in range(trials):
            for name, err in selftest_cases(seed):
                worst[name] = max(worst.get(name, 0.0), err)
                if log:
                    log(seed, name, err)
    return worst
