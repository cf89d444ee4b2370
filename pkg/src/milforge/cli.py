"""Command-line entry point: prepare, train, eval, export-attention, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import BLOCKS, run_checks
from .data import (
    BagFormatError,
    ConfigurationError,
    DatasetManifest,
    IdxFormatError,
    class_histogram,
    default_data_dir,
    find_mnist_files,
    holdout_split,
    kfold_split,
    load_mnist,
    read_bags,
    synth_mnist_bags,
    synth_spatial_bags,
    write_bags,
)
from .gradcheck import DEFAULT_TOLERANCE
from .metrics import evaluate
from .model import MODEL_KINDS, PE_MODES, MILModel, ModelConfig, config_dict, forward, load_checkpoint
from .tensor import DimensionError, NonFiniteError
from .training import CFSD_MODES, NumericalError, TrainConfig, fit

logger = logging.getLogger("milforge")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

MIN_CLASS_FREQUENCY = 0.05
MAX_RESAMPLES = 100


def _parse_folds(text: str) -> tuple[str, float]:
    kind, _, value = text.partition(":")
    try:
        if kind == "kfold" and int(value) >= 2:
            return "kfold", int(value)
        if kind == "holdout" and 0 < float(value) < 1:
            return "holdout", float(value)
    except ValueError:
        pass
    raise ConfigurationError(f"--folds must be kfold:N (N>=2) or holdout:F (0<F<1), got {text!r}")


# prepare -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    if args.kind == "mnist-bags":
        data_dir = Path(args.data_dir) if args.data_dir else default_data_dir()
        images, labels = load_mnist(*find_mnist_files(data_dir))
        seed = args.seed
        for _ in range(MAX_RESAMPLES):
            bags = synth_mnist_bags(images, labels, args.bags, (args.min_k, args.max_k), seed)
            hist = class_histogram(bags, 4)
            if hist.min() > MIN_CLASS_FREQUENCY * args.bags:
                break
            logger.warning("seed %d gives class histogram %s; resampling with seed %d", seed, hist.tolist(), seed + 1)
            seed += 1
        else:
            raise ConfigurationError(f"no seed in [{args.seed}, {seed}) gives every class > 5% of bags")
        num_classes = 4
        extra = {"kind": "mnist-bags", "requested_seed": args.seed, "bag_size_range": [args.min_k, args.max_k]}
    else:
        seed = args.seed
        bags = synth_spatial_bags(args.bags, args.k, seed)
        num_classes = 2
        extra = {"kind": "spatial", "k": args.k}
    out = Path(args.out or f"{args.kind.split('-')[0]}.milbag")
    manifest = DatasetManifest(
        num_classes=num_classes,
        feature_dim=int(bags[0].features.shape[1]),
        spatial=bags[0].coords is not None,
        bag_count=len(bags),
        seed=seed,
        extra=extra,
    )
    write_bags(out, bags, manifest)
    hist = class_histogram(bags, num_classes)
    print(f"wrote {out} (B={len(bags)}, C={num_classes}, D={manifest.feature_dim}, spatial={int(manifest.spatial)}, seed={seed})")
    for c, n in enumerate(hist):
        print(f"class {c}: {n} ({n / len(bags):.1%})")
    return EXIT_OK


# train ---------------------------------------------------------------------

def _model_config(args, manifest) -> ModelConfig:
    if args.pe == "2d" and not manifest.spatial:
        raise ConfigurationError("--pe 2d needs a dataset with coordinates")
    return ModelConfig(
        kind=args.model,
        num_classes=manifest.num_classes,
        feature_dim=manifest.feature_dim,
        pe=args.pe,
        sigma=args.sigma,
        heads=args.heads,
        embed_dim=args.embed_dim,
        attn_dim=args.attn_dim,
    )


def cmd_train(args) -> int:
    bags, manifest = read_bags(args.data)
    model_cfg = _model_config(args, manifest)
    if args.cfsd != "off" and not model_cfg.has_attention:
        raise ConfigurationError(f"--cfsd {args.cfsd} needs an attention model, not {args.model}")
    train_cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        accumulation=args.accumulation,
        max_epochs=args.max_epochs,
        patience=args.patience,
        cfsd=args.cfsd,
        warmup=args.warmup,
        seed=args.seed,
    )
    kind, value = _parse_folds(args.folds)
    # Splits depend on the dataset seed only, so training seeds share one partition.
    if kind == "kfold":
        manifest = kfold_split(bags, int(value), manifest.seed, manifest)
    else:
        manifest = holdout_split(bags, value, manifest.seed, manifest)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    results_csv = run_dir / "results.csv"
    if results_csv.exists():
        results_csv.unlink()
    snapshot = {
        "version": __version__,
        "command": "train",
        "data": str(args.data),
        "dataset_digest": manifest.digest,
        "dataset_seed": manifest.seed,
        "folds": args.folds,
        "model": config_dict(model_cfg),
        "train": train_cfg.__dict__,
    }
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    results = fit(lambda: MILModel.init(model_cfg, seed=args.seed), bags, manifest.splits(), train_cfg, run_dir)
    for f, res in enumerate(results):
        r = res.report
        print(
            f"fold {f}: best epoch {res.best.best_epoch} bag_auc={r.bag_auc:.4f} bag_f1={r.bag_f1:.4f} "
            f"inst_auc={r.inst_auc:.4f} inst_f1={r.inst_f1:.4f}"
        )
    return EXIT_OK


# eval / export -------------------------------------------------------------

def _checkpoint_path(args) -> Path:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "best.milw"
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} not found")
    return path


def _load_matching(args):
    model = load_checkpoint(_checkpoint_path(args))
    bags, manifest = read_bags(args.data)
    if manifest.feature_dim != model.config.feature_dim:
        raise DimensionError(f"dataset feature dim {manifest.feature_dim} != checkpoint {model.config.feature_dim}")
    if manifest.num_classes > model.config.num_classes:
        raise DimensionError(f"dataset has {manifest.num_classes} classes, checkpoint {model.config.num_classes}")
    if model.config.pe == "2d" and not manifest.spatial:
        raise ConfigurationError("checkpoint uses 2-D positional encoding but the dataset has no coordinates")
    return model, bags


def cmd_eval(args) -> int:
    model, bags = _load_matching(args)
    print(evaluate(model, bags).to_text())
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model, bags = _load_matching(args)
    if not model.config.has_attention:
        raise ConfigurationError(f"{model.config.kind} has no attention scores to export")
    wanted = set(args.bags) if args.bags else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c = model.config.num_classes
    written = 0
    for bag in bags:
        if wanted is not None and bag.id not in wanted:
            continue
        res = forward(model, bag.features, bag.coords)
        s = res.scores.s.data.astype(np.float64)
        alpha = res.scores.alpha.data.astype(np.float64)
        header = ["instance_index"]
        if bag.coords is not None:
            header += ["cx", "cy"]
        header += [f"s_{j}" for j in range(c)] + [f"alpha_{j}" for j in range(c)]
        with (out / f"bag_{bag.id:05d}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(bag.size):
                row = [k]
                if bag.coords is not None:
                    row += [repr(float(v)) for v in bag.coords[k]]
                row += [repr(float(v)) for v in s[k]] + [repr(float(v)) for v in alpha[k]]
                w.writerow(row)
        written += 1
    print(f"wrote {written} attention files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_checks(args.blocks or BLOCKS, seed=args.seed, tolerance=args.tolerance)
    ok = True
    for name, rep in reports.items():
        print(f"{name}: {rep.summary()}")
        ok &= rep.passed
    print("PASS" if ok else "FAIL " + " ".join(n for n, r in reports.items() if not r.passed))
    return EXIT_OK if ok else EXIT_NUMERICAL


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milforge", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prepare", help="synthesize a bag dataset")
    pr.add_argument("kind", choices=("mnist-bags", "spatial"))
    pr.add_argument("--bags", type=int, default=None)
    pr.add_argument("--seed", type=int, default=7)
    pr.add_argument("--k", type=int, default=32, help="instances per spatial bag")
    pr.add_argument("--min-k", type=int, default=10)
    pr.add_argument("--max-k", type=int, default=20)
    pr.add_argument("--data-dir", default=None, help="directory with the MNIST IDX files")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="train with early stopping and write a run directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--model", choices=MODEL_KINDS, default="clamsb")
    tr.add_argument("--pe", choices=PE_MODES, default="none")
    tr.add_argument("--cfsd", choices=CFSD_MODES, default="off")
    tr.add_argument("--lr", type=float, default=2e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--folds", default="kfold:5")
    tr.add_argument("--out", default="run")
    tr.add_argument("--weight-decay", type=float, default=1e-2)
    tr.add_argument("--accumulation", type=int, default=32)
    tr.add_argument("--max-epochs", type=int, default=150)
    tr.add_argument("--patience", type=int, default=15)
    tr.add_argument("--warmup", type=int, default=5)
    tr.add_argument("--sigma", type=float, default=100.0)
    tr.add_argument("--embed-dim", type=int, default=512)
    tr.add_argument("--attn-dim", type=int, default=256)
    tr.add_argument("--heads", type=int, default=8)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="bag and instance metrics for a checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export-attention", help="per-bag CSV of instance scores and attention")
    ex.add_argument("--data", required=True)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--bags", type=int, nargs="*", help="bag ids to export (default: all)")
    ex.set_defaults(func=cmd_export_attention)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every block at 64-bit")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    gc.add_argument("--blocks", nargs="*", choices=BLOCKS)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "prepare" and args.bags is None:
        args.bags = 2000 if args.kind == "mnist-bags" else 1000
    try:
        return args.func(args)
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, DimensionError, IdxFormatError, BagFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
