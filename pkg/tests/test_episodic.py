import copy
import json

import numpy as np
import pytest

from fsuda import episodic
from fsuda import numerics as nx
from fsuda.alignment import Discriminator, LossWeights
from fsuda.embedding import EmbeddingConfig, EmbeddingNet, class_lds, embed, extract_lds
from fsuda.episodic import (
    EpisodeSpec,
    ObjectiveConfig,
    TrainingDiverged,
    confidence_halfwidth,
    evaluate,
    sample_episode,
    total_objective,
    train,
)
from fsuda.simpattern import class_score, cls_loss, similarity_patterns
from fsuda.verify import micro_episode, micro_net

from conftest import TINY_EMBEDDING


class LabelTrap:
    """Records any attempt to look at the labels it guards."""

    def __init__(self, labels, log):
        object.__setattr__(self, "_labels", labels)
        object.__setattr__(self, "_log", log)

    def __getattribute__(self, name):
        object.__getattribute__(self, "_log").append(name)
        return object.__getattribute__(self, name)

    def _touch(self, what):
        object.__getattribute__(self, "_log").append(what)
        return object.__getattribute__(self, "_labels")

    def __array__(self, *a, **k):
        return np.asarray(self._touch("__array__"))

    def __len__(self):
        return len(self._touch("__len__"))

    def __iter__(self):
        return iter(self._touch("__iter__"))

    def __getitem__(self, i):
        return self._touch("__getitem__")[i]

    def __eq__(self, other):
        return self._touch("__eq__") == other

    __hash__ = None


# -- sampling --------------------------------------------------------------

def test_same_seed_same_episode(tiny_dataset):
    spec = EpisodeSpec(5, 1, 5)
    a = sample_episode(tiny_dataset, spec, np.random.default_rng(9))
    b = sample_episode(tiny_dataset, spec, np.random.default_rng(9))
    for field in ("classes", "support", "source_query", "target_query", "target_labels"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_episode_structure(tiny_dataset):
    spec = EpisodeSpec(4, 2, 3)
    ep = sample_episode(tiny_dataset, spec, np.random.default_rng(0))
    assert len(set(ep.classes.tolist())) == 4
    assert set(ep.classes.tolist()) <= set(tiny_dataset.split_classes("train"))
    assert ep.support.shape == (8, 16, 16)
    assert ep.source_query.shape == (12, 16, 16)
    assert ep.target_query.shape == (12, 16, 16)
    assert ep.support_labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    # support and source queries are disjoint samples
    flat = lambda a: {x.tobytes() for x in a}  # noqa: E731
    assert not flat(ep.support) & flat(ep.source_query)


def test_test_mode_targets_come_from_episode_classes(tiny_dataset):
    spec = EpisodeSpec(3, 1, 4)
    ep = sample_episode(tiny_dataset, spec, np.random.default_rng(1), split="test", mode="test")
    assert ep.target_labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    for img, lab in zip(ep.target_query, ep.target_labels):
        pool = tiny_dataset.samples(ep.classes[lab], "target")
        assert any(np.array_equal(img, x) for x in pool)


def test_sampling_rejections(tiny_dataset):
    with pytest.raises(ValueError):
        sample_episode(tiny_dataset, EpisodeSpec(17, 1, 1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_episode(tiny_dataset, EpisodeSpec(2, 10, 11), np.random.default_rng(0))
    with pytest.raises(ValueError):
        EpisodeSpec(1, 1, 1)


def test_class_frequency_uniform_chi_square(tiny_dataset):
    spec = EpisodeSpec(5, 1, 1, n_target=1)
    pool = tiny_dataset.split_classes("train")
    counts = dict.fromkeys(pool, 0)
    rng = np.random.default_rng(2024)
    episodes = 10_000
    for _ in range(episodes):
        for c in sample_episode(tiny_dataset, spec, rng).classes:
            counts[int(c)] += 1
    observed = np.array(list(counts.values()), dtype=float)
    expected = episodes * spec.n_way / len(pool)
    chi2 = ((observed - expected) ** 2 / expected).sum()
    dof = len(pool) - 1
    assert chi2 <= dof + 3 * np.sqrt(2 * dof)
    sigma = np.sqrt(episodes * (spec.n_way / len(pool)) * (1 - spec.n_way / len(pool)))
    assert np.abs(observed - expected).max() <= 3 * sigma


# -- objective -------------------------------------------------------------

def test_zero_weights_reduce_to_classification_loss(f64):
    rng = np.random.default_rng(0)
    ep = micro_episode(rng)
    net, disc = micro_net(H=5, seed=1), Discriminator(4, seed=1)
    total, terms = total_objective(ep, net, disc, ObjectiveConfig(weights=LossWeights(0, 0, 0)))
    fm_s, fm_q = embed(ep.support, net), embed(ep.source_query, net)
    pats = similarity_patterns(extract_lds(fm_q), class_lds(fm_s, 2, 1), 5, 5, 3)
    direct = cls_loss(class_score(pats), ep.source_labels).item()
    assert total.item() == terms["l_cls"]
    assert total.item() == pytest.approx(direct, rel=1e-12)


def test_identical_query_sets_give_zero_spa(f64):
    rng = np.random.default_rng(3)
    ep = micro_episode(rng, n_target=4)
    ep.target_query = ep.source_query.copy()
    _, terms = total_objective(ep, micro_net(H=5, seed=2), Discriminator(4), ObjectiveConfig())
    assert terms["l_spa"] == 0.0


def _grads(ep, net, disc, weights):
    params = list(net.params) + list(disc.params)
    for p in params:
        p.grad = None
    loss, _ = total_objective(ep, net, disc, ObjectiveConfig(weights=weights, reverse=False))
    loss.backward()
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


@pytest.mark.parametrize("seed", range(3))
def test_total_gradient_is_sum_of_term_gradients(f64, seed):
    rng = np.random.default_rng(seed)
    ep = micro_episode(rng)
    net, disc = micro_net(H=5, seed=seed), Discriminator(4, seed=seed)
    w = LossWeights(spa=0.3, adv=0.2, msm=0.4)
    full = _grads(ep, net, disc, w)
    base = _grads(ep, net, disc, LossWeights(0, 0, 0))
    parts = [_grads(ep, net, disc, LossWeights(**{name: getattr(w, name), **{o: 0 for o in ("spa", "adv", "msm") if o != name}}))
             for name in ("spa", "adv", "msm")]
    for i, g in enumerate(full):
        summed = base[i] + sum(p[i] - base[i] for p in parts)
        np.testing.assert_allclose(g, summed, atol=1e-10)


@pytest.mark.parametrize("term", ["spa", "adv", "msm"])
def test_each_term_passes_finite_differences(f64, term):
    rng = np.random.default_rng(11)
    ep = micro_episode(rng)
    net, disc = micro_net(H=5, seed=4), Discriminator(4, seed=4)
    w = LossWeights(**{t: (1.0 if t == term else 0.0) for t in ("spa", "adv", "msm")})
    cfg = ObjectiveConfig(weights=w, reverse=False)
    params = list(net.params) + (list(disc.params) if term == "adv" else [])
    assert nx.gradient_check(lambda: total_objective(ep, net, disc, cfg)[0], params, 1e-6) <= 1e-3


def test_objective_never_reads_target_labels(tiny_dataset, tiny_train_config, monkeypatch):
    log = []
    real = episodic.sample_episode

    def trapped(*a, **k):
        ep = real(*a, **k)
        ep.target_labels = LabelTrap(ep.target_labels, log)
        return ep

    monkeypatch.setattr(episodic, "sample_episode", trapped)
    train(tiny_dataset, tiny_train_config(episodes=3, weights=LossWeights(0.1, 0.05, 0.1, rspa=0.1)))
    assert log == []
    # the trap itself does fire when labels are read
    ep = trapped(tiny_dataset, EpisodeSpec(2, 1, 1), np.random.default_rng(0))
    np.asarray(ep.target_labels)
    assert log


def test_training_mode_targets_are_class_unconstrained(tiny_dataset):
    spec = EpisodeSpec(2, 1, 5)
    foreign = 0
    for s in range(20):
        ep = sample_episode(tiny_dataset, spec, np.random.default_rng(s))
        foreign += int((np.asarray(ep.target_labels) == -1).sum())
    assert foreign > 0


# -- training --------------------------------------------------------------

def test_schedule_and_metrics_stream(tiny_dataset, tiny_train_config, tmp_path):
    assert nx.step_decay(1e-4, 2500) == pytest.approx(2.5e-5)
    cfg = tiny_train_config(episodes=4, halve_every=2)
    path = tmp_path / "metrics.jsonl"
    res = train(tiny_dataset, cfg, metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["episode"] for r in rows] == [0, 1, 2, 3]
    assert [r["lr"] for r in rows] == [1e-3, 1e-3, 5e-4, 5e-4]
    for r in rows:
        assert {"episode", "l_cls", "l_spa", "l_adv", "l_msm", "lr", "wall_ms"} <= set(r)
    assert res.metrics == rows


def test_identical_runs_give_identical_checkpoints(tiny_dataset, tiny_train_config, tmp_path):
    cfg = tiny_train_config(episodes=3)
    train(tiny_dataset, cfg, checkpoint_path=tmp_path / "a.ckpt")
    train(tiny_dataset, cfg, checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_divergence_aborts_with_episode_seed(tiny_dataset, tiny_train_config, monkeypatch):
    real = episodic.total_objective

    def poisoned(ep, net, disc, cfg):
        loss, terms = real(ep, net, disc, cfg)
        return loss * float("nan"), terms

    monkeypatch.setattr(episodic, "total_objective", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_dataset, tiny_train_config(seed=5))
    assert info.value.episode == 0
    assert info.value.seed == [5, 0]


def test_alternating_mode_runs(tiny_dataset, tiny_train_config):
    res = train(tiny_dataset, tiny_train_config(episodes=2, adv_mode="alternating"))
    assert len(res.metrics) == 2


def test_train_config_rejections(tiny_train_config):
    for bad in (dict(episodes=0), dict(lr=0.0), dict(adv_mode="x"), dict(select="x")):
        with pytest.raises(ValueError):
            tiny_train_config(**bad)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_classification_loss_trends_down(tiny_dataset, tiny_train_config, seed):
    res = train(tiny_dataset, tiny_train_config(episodes=500, seed=seed))
    cls = np.array([r["l_cls"] for r in res.metrics])
    assert cls[-200:].mean() < cls[:200].mean()


def test_best_val_selection(tiny_dataset, tiny_train_config):
    cfg = tiny_train_config(episodes=4, checkpoint_every=2, select="best-val", val_tasks=3, n_way=3)
    res = train(tiny_dataset, cfg)
    assert res.best_val is not None and 0 <= res.best_val <= 100


# -- evaluation ------------------------------------------------------------

def tiny_net(seed=0):
    return EmbeddingNet(EmbeddingConfig(**TINY_EMBEDDING, seed=seed))


def test_single_task_halfwidth_zero(tiny_dataset):
    rep = evaluate(tiny_dataset, tiny_net(), EpisodeSpec(3, 1, 5, seed=7), 1)
    assert rep.ci95 == 0.0 and rep.tasks == 1
    assert 0 <= rep.mean <= 100
    assert confidence_halfwidth([50.0]) == 0.0


def test_halfwidth_formula():
    vals = [20.0, 40.0, 60.0, 80.0]
    assert confidence_halfwidth(vals) == pytest.approx(1.96 * np.std(vals, ddof=1) / 2)


def test_report_invariant_to_order_and_workers(tiny_dataset):
    spec = EpisodeSpec(3, 1, 5, seed=2)
    net = tiny_net(1)
    serial = evaluate(tiny_dataset, net, spec, 6)
    pooled = evaluate(tiny_dataset, net, spec, 6, workers=2)
    assert serial.to_json() == pooled.to_json()
    assert serial.mean == pytest.approx(np.mean(serial.accuracies[::-1]))
    assert evaluate(tiny_dataset, net, spec, 6).to_json() == serial.to_json()


def test_eval_rejects_training_classes(tiny_dataset):
    with pytest.raises(ValueError):
        evaluate(tiny_dataset, tiny_net(), EpisodeSpec(3, 1, 5), 1, split="train")
    leaky = copy.copy(tiny_dataset)
    leaky.manifest = copy.deepcopy(tiny_dataset.manifest)
    leaky.manifest.splits["test"] = leaky.manifest.splits["test"] + leaky.manifest.splits["train"][:1]
    with pytest.raises(ValueError, match="shares classes"):
        evaluate(leaky, tiny_net(), EpisodeSpec(3, 1, 5), 1)
