"""Episode sampling, the combined training objective, training and evaluation."""

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .alignment import Discriminator, LossWeights, adv_loss, msm_loss, rspa_loss, spa_loss
from .embedding import EmbeddingConfig, EmbeddingNet, class_lds, embed, extract_lds, multiscale_lds, pretrain
from .fileformat import save_checkpoint
from .simpattern import DEFAULT_TOPK, class_score, cls_loss, image_patterns, predict, similarity_patterns


class TrainingDiverged(FloatingPointError):
    def __init__(self, episode, seed, value):
        super().__init__(f"non-finite loss {value} at episode {episode} (episode seed {seed})")
        self.episode = episode
        self.seed = seed


def fingerprint(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_target: int = None
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ValueError(f"invalid episode shape N={self.n_way} K={self.k_shot} Nq={self.n_query}")
        if self.n_target is not None and self.n_target < 1:
            raise ValueError("target query count must be positive")

    @property
    def target_count(self):
        return self.n_target if self.n_target is not None else self.n_way * self.n_query


@dataclass
class Episode:
    """One task. Labels are 0-based positions within ``classes``.

    ``target_labels`` exists only for scoring evaluation tasks; the training
    objective never reads it.
    """

    classes: np.ndarray
    support: np.ndarray
    support_labels: np.ndarray
    source_query: np.ndarray
    source_labels: np.ndarray
    target_query: np.ndarray
    target_labels: object = None


def sample_episode(dataset, spec, rng, split="train", mode="train"):
    """Draw N classes, K+N_q source images per class and a target query set.

    In ``train`` mode target queries are drawn from all classes of the split
    without regard to label; in ``test`` mode N_q target images are drawn
    from each of the episode's classes.
    """
    pool = dataset.split_classes(split)
    N, K, Nq = spec.n_way, spec.k_shot, spec.n_query
    if N > len(pool):
        raise ValueError(f"{N}-way episode needs {N} classes; split {split!r} has {len(pool)}")
    classes = rng.choice(pool, size=N, replace=False)
    support, source_query = [], []
    for c in classes:
        imgs = dataset.samples(c, "source")
        if len(imgs) < K + Nq:
            raise ValueError(f"class {c} has {len(imgs)} source samples, episode needs {K + Nq}")
        pick = rng.choice(len(imgs), size=K + Nq, replace=False)
        support.append(imgs[pick[:K]])
        source_query.append(imgs[pick[K:]])
    if mode == "train":
        per_class = [len(dataset.samples(c, "target")) for c in pool]
        total = sum(per_class)
        if spec.target_count > total:
            raise ValueError(f"need {spec.target_count} target images, split has {total}")
        flat = rng.choice(total, size=spec.target_count, replace=False)
        offsets = np.cumsum([0] + per_class)
        owner = np.searchsorted(offsets, flat, side="right") - 1
        target = np.stack([dataset.samples(pool[o], "target")[f - offsets[o]] for o, f in zip(owner, flat)])
        lookup = {c: i for i, c in enumerate(classes)}
        target_labels = np.array([lookup.get(pool[o], -1) for o in owner])
    elif mode == "test":
        target, labels = [], []
        for i, c in enumerate(classes):
            imgs = dataset.samples(c, "target")
            if len(imgs) < Nq:
                raise ValueError(f"class {c} has {len(imgs)} target samples, task needs {Nq}")
            target.append(imgs[rng.choice(len(imgs), size=Nq, replace=False)])
            labels.extend([i] * Nq)
        target = np.concatenate(target)
        target_labels = np.asarray(labels)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return Episode(
        classes=np.asarray(classes),
        support=np.concatenate(support),
        support_labels=np.repeat(np.arange(N), K),
        source_query=np.concatenate(source_query),
        source_labels=np.repeat(np.arange(N), Nq),
        target_query=target,
        target_labels=target_labels,
    )


@dataclass(frozen=True)
class ObjectiveConfig:
    weights: LossWeights = LossWeights()
    topk: int = DEFAULT_TOPK
    msm_k: int = 3
    msm_n: int = 10
    reverse: bool = True


def total_objective(episode, net, disc, cfg=ObjectiveConfig()):
    """Classification loss plus weighted alignment terms for one episode.

    Returns ``(loss, terms)`` where ``terms`` maps l_cls, l_spa, l_adv,
    l_msm (and l_rspa when weighted) to floats. Terms with zero weight are
    evaluated for reporting but left out of the returned graph.
    """
    N = len(episode.classes)
    K = len(episode.support) // N
    n_sup, n_src = len(episode.support), len(episode.source_query)
    images = np.concatenate([episode.support, episode.source_query, episode.target_query])
    fm = embed(images, net)
    H, W, C = fm.shape[1:]
    lds = extract_lds(fm)
    support_maps = fm[:n_sup]
    query_lds = lds[n_sup:]
    patterns = similarity_patterns(query_lds, class_lds(support_maps, N, K), H, W, cfg.topk)

    w = cfg.weights
    terms = {}
    l_cls = cls_loss(class_score(patterns[:n_src]), episode.source_labels)
    total = l_cls
    terms["l_cls"] = l_cls

    per_image = image_patterns(patterns, K)
    src_sets, tgt_sets = per_image[:, :n_src], per_image[:, n_src:]
    terms["l_spa"] = spa_loss(src_sets, tgt_sets)
    if w.spa:
        total = total + w.spa * terms["l_spa"]
    if w.rspa:
        terms["l_rspa"] = rspa_loss(src_sets)
        total = total + w.rspa * terms["l_rspa"]

    src_lds = nx.reshape(query_lds[:n_src], (-1, C))
    tgt_lds = nx.reshape(query_lds[n_src:], (-1, C))
    terms["l_adv"] = adv_loss(src_lds, tgt_lds, disc, reverse=cfg.reverse)
    if w.adv:
        total = total + w.adv * terms["l_adv"]

    terms["l_msm"] = msm_loss(query_lds[n_src:], multiscale_lds(support_maps), cfg.msm_k, cfg.msm_n)
    if w.msm:
        total = total + w.msm * terms["l_msm"]
    return total, {k: float(v.item()) for k, v in terms.items()}


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_target: int = None
    lr: float = 1e-4
    halve_every: int = 1000
    weights: LossWeights = LossWeights()
    topk: int = DEFAULT_TOPK
    msm_k: int = 3
    msm_n: int = 10
    adv_mode: str = "reversal"
    precision: str = "float32"
    seed: int = 0
    pretrain: bool = False
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    checkpoint_every: int = 0
    select: str = "final"
    val_tasks: int = 100
    embedding: EmbeddingConfig = EmbeddingConfig()

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episode count must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.adv_mode not in ("reversal", "alternating"):
            raise ValueError(f"unknown adversarial mode {self.adv_mode!r}")
        if self.select not in ("final", "best-val"):
            raise ValueError(f"unknown selection rule {self.select!r}")

    @property
    def episode_spec(self):
        return EpisodeSpec(self.n_way, self.k_shot, self.n_query, self.n_target, self.seed)

    @property
    def objective(self):
        return ObjectiveConfig(self.weights, self.topk, self.msm_k, self.msm_n,
                               reverse=self.adv_mode == "reversal")

    def to_dict(self):
        d = asdict(self)
        return d

    @property
    def fingerprint(self):
        return fingerprint(self.to_dict())


@dataclass
class TrainResult:
    net: EmbeddingNet
    disc: Discriminator
    metrics: list = field(default_factory=list)
    best_val: float = None


def named_arrays(net, disc):
    return list(net.named_arrays()) + list(disc.named_arrays())


def train(dataset, cfg=TrainConfig(), net=None, metrics_path=None, checkpoint_path=None, log=None):
    """Episodic training; one optimizer step per episode.

    In reversal mode a single Adam instance updates the embedding and the
    discriminator from one backward pass. In alternating mode the
    discriminator first takes its own ascent step on the adversarial loss
    with the embedding frozen, then the embedding steps on the full objective.
    """
    with nx.precision(cfg.precision):
        if net is None:
            net = EmbeddingNet(replace(cfg.embedding, seed=cfg.seed))
            if cfg.pretrain:
                xs, ys = dataset.labeled("train", "source")
                pretrain(net, xs, ys, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed)
        disc = Discriminator(net.config.channels, seed=cfg.seed)
        if cfg.adv_mode == "reversal":
            opt = nx.Adam(list(net.params) + list(disc.params), lr=cfg.lr)
            d_opt = None
        else:
            opt = nx.Adam(list(net.params), lr=cfg.lr)
            d_opt = nx.Adam(list(disc.params), lr=cfg.lr)
        spec = cfg.episode_spec
        objective = cfg.objective
        result = TrainResult(net, disc)
        best = None
        sink = open(metrics_path, "w") if metrics_path else None
        try:
            for episode in range(cfg.episodes):
                started = time.perf_counter()
                rng = np.random.default_rng([cfg.seed, episode])
                ep = sample_episode(dataset, spec, rng)
                lr = nx.step_decay(cfg.lr, episode, cfg.halve_every)
                opt.lr = lr
                if d_opt is not None:
                    d_opt.lr = lr
                    _discriminator_step(ep, net, disc, d_opt)
                loss, terms = total_objective(ep, net, disc, objective)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(episode, [cfg.seed, episode], value)
                opt.zero_grad()
                if d_opt is not None:
                    d_opt.zero_grad()
                loss.backward()
                opt.step()
                record = {"episode": episode, **{k: terms[k] for k in ("l_cls", "l_spa", "l_adv", "l_msm")}}
                if "l_rspa" in terms:
                    record["l_rspa"] = terms["l_rspa"]
                record["lr"] = lr
                record["wall_ms"] = round((time.perf_counter() - started) * 1000, 3)
                result.metrics.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                if log:
                    log(record)
                at_checkpoint = cfg.checkpoint_every and (episode + 1) % cfg.checkpoint_every == 0
                if at_checkpoint and checkpoint_path:
                    save_checkpoint(f"{checkpoint_path}.ep{episode + 1}", named_arrays(net, disc))
                if at_checkpoint and cfg.select == "best-val":
                    acc = evaluate(dataset, net, EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.n_query, seed=cfg.seed),
                                   cfg.val_tasks, split="val", topk=cfg.topk).mean
                    if best is None or acc > best[0]:
                        best = (acc, [(n, a.copy()) for n, a in named_arrays(net, disc)])
        finally:
            if sink:
                sink.close()
        if best is not None:
            arrays = dict(best[1])
            net.load_arrays(arrays)
            disc.load_arrays(arrays)
            result.best_val = best[0]
        if checkpoint_path:
            save_checkpoint(checkpoint_path, named_arrays(net, disc))
        return result


def _discriminator_step(ep, net, disc, d_opt):
    n_src = len(ep.source_query)
    fm = embed(np.concatenate([ep.source_query, ep.target_query]), net)
    lds = extract_lds(fm).detach()
    C = lds.shape[-1]
    src = nx.reshape(lds[:n_src], (-1, C))
    tgt = nx.reshape(lds[n_src:], (-1, C))
    loss = -adv_loss(src, tgt, disc)
    d_opt.zero_grad()
    loss.backward()
    d_opt.step()


@dataclass
class EvalReport:
    accuracies: list
    mean: float
    ci95: float
    tasks: int
    fingerprint: str
    split: str = "test"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def confidence_halfwidth(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def task_accuracy(dataset, net, spec, task, split="test", topk=DEFAULT_TOPK):
    rng = np.random.default_rng([spec.seed, task, 0xE])
    ep = sample_episode(dataset, spec, rng, split=split, mode="test")
    N, K = spec.n_way, spec.k_shot
    fm_sup = embed(ep.support, net)
    fm_q = embed(ep.target_query, net)
    H, W = fm_q.shape[1:3]
    pats = similarity_patterns(extract_lds(fm_q), class_lds(fm_sup, N, K), H, W, topk)
    pred = predict(class_score(pats))
    return float(100.0 * np.mean(pred == ep.target_labels))


def _worker(args):
    dataset, arrays, config, precision, spec, tasks, split, topk = args
    with nx.precision(precision):
        net = EmbeddingNet(config)
        net.load_arrays(arrays)
        return [task_accuracy(dataset, net, spec, t, split, topk) for t in tasks]


def evaluate(dataset, net, spec, task_count, split="test", topk=DEFAULT_TOPK, workers=1, extra=None):
    """Mean target accuracy over ``task_count`` tasks from a held-out split.

    Task t is sampled from its own generator seeded by (spec.seed, t), so
    the report does not depend on evaluation order or worker count.
    """
    if split == "train":
        raise ValueError("evaluation split must be disjoint from the training classes")
    train_classes = set(dataset.split_classes("train"))
    overlap = train_classes & set(dataset.split_classes(split))
    if overlap:
        raise ValueError(f"split {split!r} shares classes {sorted(overlap)} with training")
    if task_count < 1:
        raise ValueError("need at least one task")
    tasks = list(range(task_count))
    if workers > 1:
        chunks = [tasks[i::workers] for i in range(workers)]
        arrays = dict(net.named_arrays())
        precision = "float64" if nx.get_dtype() is np.float64 else "float32"
        jobs = [(dataset, arrays, net.config, precision, spec, ch, split, topk) for ch in chunks]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_worker, jobs))
        by_task = {}
        for ch, accs in zip(chunks, parts):
            by_task.update(zip(ch, accs))
        accs = [by_task[t] for t in tasks]
    else:
        accs = [task_accuracy(dataset, net, spec, t, split, topk) for t in tasks]
    ident = {"spec": asdict(spec), "tasks": task_count, "split": split, "topk": topk,
             "params": hashlib.sha256(b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                                               for _, a in net.named_arrays())).hexdigest()}
    if extra:
        ident["extra"] = extra
    return EvalReport(
        accuracies=accs,
        mean=float(np.mean(accs)),
        ci95=confidence_halfwidth(accs),
        tasks=task_count,
        fingerprint=fingerprint(ident),
        split=split,
    )
