"""Command-line entry point: ``fsuda <subcommand> [flags]``.

Every command that writes files also writes a config fingerprint (a hash of
all effective flags) next to them, so any report can be traced back to the
run that made it.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from . import __version__
from . import numerics as nx
from .alignment import LossWeights
from .data import DatasetError, DatasetManifest, SyntheticSpec, gen_synthetic, load_dataset
from .embedding import EmbeddingConfig, EmbeddingNet, load_embedding, pretrain, save_embedding
from .episodic import EpisodeSpec, TrainConfig, evaluate, fingerprint, train
from .fileformat import FormatError, atomic_write


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def weight(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# where results go and how fast they are produced do not change them
NOT_FINGERPRINTED = {"func", "out", "metrics", "quiet", "workers"}


def _flags(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in NOT_FINGERPRINTED}


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _sidecar(path):
    return os.fspath(path) + ".json"


def _embedding_for(dataset, seed):
    m = dataset.manifest
    return EmbeddingConfig(height=m.height, width=m.width, seed=seed)


def _load_net(path, fallback):
    """Rebuild a network from a checkpoint and its architecture sidecar."""
    side = _sidecar(path)
    config = fallback
    if os.path.exists(side):
        with open(side) as fh:
            config = EmbeddingConfig(**json.load(fh)["embedding"])
    return load_embedding(path, config)


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args):
    manifest = DatasetManifest(classes=args.classes, samples=args.samples, height=args.size, width=args.size,
                               split_sizes=tuple(args.splits), seed=args.seed)
    spec = SyntheticSpec(noise=args.noise, outline_width=args.outline_width)
    gen_synthetic(args.out, manifest, spec, force=args.force)
    _write_json(os.path.join(args.out, "generate.json"), {"fingerprint": fingerprint(_flags(args)),
                                                          "flags": _flags(args)})
    print(f"wrote {manifest.classes} classes x {len(manifest.domains)} domains to {args.out}")


def cmd_pretrain(args):
    dataset = load_dataset(args.data)
    with nx.precision(args.precision):
        net = EmbeddingNet(_embedding_for(dataset, args.seed))
        xs, ys = dataset.labeled("train", "source")
        _, history = pretrain(net, xs, ys, epochs=args.epochs, lr=args.lr, seed=args.seed,
                              log=lambda e, v: print(f"epoch {e}: loss {v:.4f}"))
        save_embedding(args.out, net)
    _write_json(_sidecar(args.out), {"fingerprint": fingerprint(_flags(args)), "flags": _flags(args),
                                     "embedding": net.config.to_dict(), "history": history})


def _train_config(args, dataset):
    return TrainConfig(
        episodes=args.episodes, n_way=args.n_way, k_shot=args.k_shot, n_query=args.n_query,
        n_target=args.n_target, lr=args.lr, halve_every=args.halve_every,
        weights=LossWeights(spa=args.lambda_s, adv=args.lambda_a, msm=args.lambda_m, rspa=args.lambda_r),
        topk=args.top_k, msm_k=args.msm_k, msm_n=args.msm_n, adv_mode=args.adv_mode,
        precision=args.precision, seed=args.seed, pretrain=args.pretrain,
        pretrain_epochs=args.pretrain_epochs, checkpoint_every=args.checkpoint_every,
        select=args.select, val_tasks=args.val_tasks, embedding=_embedding_for(dataset, args.seed),
    )


def cmd_train(args):
    dataset = load_dataset(args.data)
    cfg = _train_config(args, dataset)
    with nx.precision(cfg.precision):
        net = _load_net(args.init, replace(cfg.embedding, seed=cfg.seed)) if args.init else None
        every = max(cfg.episodes // 20, 1)

        def log(rec):
            if rec["episode"] % every == 0 or rec["episode"] == cfg.episodes - 1:
                print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))

        result = train(dataset, cfg, net=net, metrics_path=args.metrics, checkpoint_path=args.out,
                       log=None if args.quiet else log)
    side = {"fingerprint": fingerprint(_flags(args)), "flags": _flags(args), "config": cfg.to_dict(),
            "embedding": result.net.config.to_dict(),
            "architecture": [[n, list(s)] for n, s in result.net.architecture()]}
    if result.best_val is not None:
        side["best_val"] = result.best_val
    _write_json(_sidecar(args.out), side)
    print(f"checkpoint {args.out} (config {side['fingerprint']})")


def cmd_eval(args):
    dataset = load_dataset(args.data)
    with nx.precision(args.precision):
        if args.checkpoint:
            net = _load_net(args.checkpoint, _embedding_for(dataset, args.init_seed))
        else:
            net = EmbeddingNet(_embedding_for(dataset, args.init_seed))
        spec = EpisodeSpec(args.n_way, args.k_shot, args.n_query, seed=args.seed)
        report = evaluate(dataset, net, spec, args.tasks, split=args.split, topk=args.top_k,
                          workers=args.workers, extra=_flags(args))
    text = report.to_json()
    if args.out:
        atomic_write(args.out, text.encode())
    print(f"{args.split}: {report.mean:.2f} +- {report.ci95:.2f} over {report.tasks} tasks"
          f" (config {report.fingerprint})")
    if not args.out:
        sys.stdout.write(text)


def cmd_gradcheck(args):
    from .verify import gradcheck_suite

    worst = gradcheck_suite(args.instances)
    return _report_suite("gradcheck", worst, args.tol, "max relative error")


def cmd_selftest(args):
    from .verify import selftest_suite

    worst = selftest_suite(args.trials)
    return _report_suite("selftest", worst, args.tol, "max deviation from oracle")


def _report_suite(label, worst, tol, what):
    failed = [n for n, e in worst.items() if not e <= tol]
    for name, err in worst.items():
        print(f"{'FAIL' if name in failed else 'ok  '} {name:24s} {what} {err:.3e}")
    print(f"{label}: {len(worst) - len(failed)}/{len(worst)} checks within {tol:g}")
    return 1 if failed else 0


# -- parser ----------------------------------------------------------------

def _episode_flags(p, n_query=15):
    p.add_argument("--n-way", "-N", type=positive_int, default=5)
    p.add_argument("--k-shot", "-K", type=positive_int, default=1)
    p.add_argument("--n-query", type=positive_int, default=n_query, help="queries per class (N_q)")
    p.add_argument("--top-k", type=positive_int, default=3)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser():
    parser = argparse.ArgumentParser(prog="fsuda", description="Few-shot unsupervised domain adaptation on synthetic glyphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=positive_int, default=60)
    p.add_argument("--samples", type=positive_int, default=30)
    p.add_argument("--size", type=positive_int, default=32)
    p.add_argument("--splits", type=int, nargs=3, default=(40, 10, 10), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=weight, default=SyntheticSpec.noise, help="target-domain noise scale")
    p.add_argument("--outline-width", type=positive_float, default=SyntheticSpec.outline_width)
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised warm start of the embedding on source images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=positive_int, default=5)
    p.add_argument("--lr", type=positive_float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="episodic training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; a .json sidecar is written next to it")
    p.add_argument("--metrics", help="per-episode JSONL metrics path")
    p.add_argument("--init", help="start from this embedding checkpoint")
    p.add_argument("--episodes", type=positive_int, default=2000)
    p.add_argument("--lr", type=positive_float, default=1e-4)
    p.add_argument("--halve-every", type=positive_int, default=1000)
    p.add_argument("--n-target", type=positive_int, default=None, help="target queries per episode")
    p.add_argument("--lambda-s", type=weight, default=LossWeights.spa)
    p.add_argument("--lambda-a", type=weight, default=LossWeights.adv)
    p.add_argument("--lambda-m", type=weight, default=LossWeights.msm)
    p.add_argument("--lambda-r", type=weight, default=LossWeights.rspa, help="covariance regularizer weight")
    p.add_argument("--msm-k", type=positive_int, default=3)
    p.add_argument("--msm-n", type=positive_int, default=10)
    p.add_argument("--adv-mode", choices=("reversal", "alternating"), default="reversal")
    p.add_argument("--pretrain", action="store_true")
    p.add_argument("--pretrain-epochs", type=positive_int, default=5)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--select", choices=("final", "best-val"), default="final")
    p.add_argument("--val-tasks", type=positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    _episode_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean target accuracy over random test tasks")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="embedding checkpoint; omitted means an untrained network")
    p.add_argument("--init-seed", type=int, default=0, help="initialization seed of an untrained network")
    p.add_argument("--tasks", type=positive_int, default=300)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--seed", type=int, default=0, help="task sampling seed")
    p.add_argument("--out", help="report JSON path (default: stdout)")
    _episode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--instances", type=positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="compare fast paths with explicit-loop oracles")
    p.add_argument("--trials", type=positive_int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (DatasetError, FormatError, FileExistsError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"fsuda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
