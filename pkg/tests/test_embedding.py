import numpy as np
import pytest

from fsuda import numerics as nx
from fsuda.embedding import (
    EmbeddingConfig,
    EmbeddingNet,
    embed,
    extract_lds,
    ld_position,
    ld_row,
    load_embedding,
    multiscale_lds,
    pretrain,
    save_embedding,
)
from fsuda.verify import micro_net


def test_default_geometry_is_5x5x32():
    assert EmbeddingConfig().feature_shape == (5, 5, 32)
    out = embed(np.zeros((2, 32, 32)), EmbeddingNet())
    assert out.shape == (2, 5, 5, 32)


def test_config_rejects_tiny_maps():
    with pytest.raises(ValueError):
        EmbeddingConfig(height=8, width=8).validate()
    with pytest.raises(ValueError):
        EmbeddingConfig(channels=2).validate()


def test_zero_image_with_zeroed_final_block():
    net = EmbeddingNet()
    for name, p in net.params.items():
        if name.startswith("embed.block2"):
            p.data = np.zeros_like(p.data)
    assert not embed(np.zeros((32, 32)), net).data.any()


def test_embed_deterministic(rng):
    img = rng.uniform(size=(3, 32, 32))
    a = embed(img, EmbeddingNet(EmbeddingConfig(seed=4))).data
    b = embed(img, EmbeddingNet(EmbeddingConfig(seed=4))).data
    assert a.tobytes() == b.tobytes()


def test_embed_rejects_wrong_extents():
    with pytest.raises(ValueError):
        embed(np.zeros((1, 28, 28)), EmbeddingNet())


def test_extract_lds_single_pixel():
    fm = nx.Tensor(np.arange(4.0).reshape(1, 1, 4))
    np.testing.assert_array_equal(extract_lds(fm).data, [[0, 1, 2, 3]])


def test_extract_lds_matches_per_pixel_gather(rng):
    fm = rng.normal(size=(4, 5, 3))
    lds = extract_lds(nx.Tensor(fm)).data
    for y in range(4):
        for x in range(5):
            np.testing.assert_array_equal(lds[y * 5 + x], fm[y, x].astype(np.float32))
    regrouped = lds.reshape(4, 5, 3)
    np.testing.assert_array_equal(regrouped, fm.astype(np.float32))


def test_ld_index_map_is_bijective():
    H, W, K = 3, 4, 2
    seen = set()
    for row in range(K * H * W):
        pos = ld_position(row, H, W)
        assert ld_row(*pos, H, W) == row
        seen.add(pos)
    assert len(seen) == K * H * W


def test_multiscale_constant_map():
    fm = np.tile(np.array([1.0, -2.0, 3.0, 0.5]), (2, 6, 5, 1))
    out = multiscale_lds(nx.Tensor(fm)).data
    assert out.shape == (60, 4)
    np.testing.assert_allclose(out, np.tile([1.0, -2.0, 3.0, 0.5], (60, 1)), rtol=1e-6)


def test_multiscale_scales(f64, rng):
    fm = rng.normal(size=(5, 5, 4))
    out = multiscale_lds(nx.Tensor(fm)).data
    np.testing.assert_allclose(out[:25], fm.reshape(25, 4))
    np.testing.assert_allclose(out[29], fm.mean(axis=(0, 1)))
    # 2x2 grid windows partition rows/cols as [0,3) and [3,5)
    np.testing.assert_allclose(out[25], fm[:3, :3].mean(axis=(0, 1)))
    np.testing.assert_allclose(out[28], fm[3:, 3:].mean(axis=(0, 1)))


def test_multiscale_rejects_small_maps():
    with pytest.raises(ValueError):
        multiscale_lds(nx.Tensor(np.zeros((1, 4, 5, 3))))


def test_embed_gradient(f64, rng):
    net = micro_net(3, 4, seed=1)
    imgs = rng.uniform(size=(2, 5, 5))
    proj = nx.Tensor(rng.normal(size=(2, 3, 3, 4)))
    assert nx.gradient_check(lambda: (embed(imgs, net) * proj).sum(), list(net.params), step=1e-6) < 1e-3


def _toy_labeled(n_classes, per_class, rng):
    cfg = EmbeddingConfig(height=12, width=12, blocks=2, channels=8, pooled_blocks=1)
    protos = rng.uniform(size=(n_classes, 12, 12))
    xs = np.concatenate([protos[c] + 0.1 * rng.normal(size=(per_class, 12, 12)) for c in range(n_classes)])
    ys = np.repeat(np.arange(n_classes), per_class)
    return cfg, xs, ys


def test_pretrain_reduces_loss():
    trend = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        cfg, xs, ys = _toy_labeled(10, 8, rng)
        net = EmbeddingNet(EmbeddingConfig(**{**cfg.to_dict(), "seed": seed}))
        _, history = pretrain(net, xs, ys, epochs=6, lr=3e-3, batch_size=16, seed=seed)
        trend.append(history[-1] < history[0])
    assert all(trend)


def test_pretrain_keeps_architecture_and_rejects_one_class(rng):
    cfg, xs, ys = _toy_labeled(3, 4, rng)
    net = EmbeddingNet(cfg)
    fresh = EmbeddingNet(cfg)
    pretrain(net, xs, ys, epochs=1, batch_size=6)
    assert net.architecture() == fresh.architecture()
    with pytest.raises(ValueError):
        pretrain(net, xs[:4], np.zeros(4), epochs=1)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = EmbeddingNet(EmbeddingConfig(seed=3))
    path = tmp_path / "f.ckpt"
    save_embedding(path, net)
    raw = path.read_bytes()
    assert raw[:4] == b"FSUD"
    back = load_embedding(path, EmbeddingConfig(seed=99))
    for (n1, a), (n2, b) in zip(net.named_arrays(), back.named_arrays()):
        assert n1 == n2
        np.testing.assert_array_equal(a.astype(np.float32), b)
