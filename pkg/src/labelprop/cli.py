"""Command-line entry point.

Subcommands: train, propagate, augment-demo, invariance, hoeffding,
ablation.  Every run writes a resolved-config snapshot (also echoed to
stdout as JSON) under --out.  Exit codes: 0 success, 1 configuration or
input-file error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone, data, io, metrics, trainer
from .align import uniform_prior
from .augment import (
    TRANSFORM_RANGES,
    AugmentPolicy,
    TransformSpec,
    apply_transform,
    derive_rng,
    raw_strong_augment,
)
from .errors import ConfigError, FormatError, InputError, LabelPropError
from .graph import LabelSeed
from .trainer import RunConfig

_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _load_config(path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    values: dict = {}
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            values = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {cfg_path} is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    unknown = set(values) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        values["seed"] = seed
    if "hidden_dims" in values:
        values["hidden_dims"] = tuple(values["hidden_dims"])
    return RunConfig(**values)


def _write_resolved(out_dir: Path, cfg_dict: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg_dict, indent=2, sort_keys=True)
    (out_dir / "resolved_config.json").write_text(text + "\n")
    print(text)


def _build_dataset(selector: str, cfg: RunConfig, args) -> tuple[data.Dataset, data.Dataset]:
    if selector == "two-moons":
        full = data.two_moons(args.data_n, noise_sd=args.noise, seed=cfg.seed)
    elif selector == "blob-images":
        full = data.blob_images(
            args.data_n, num_classes=args.classes, side=args.side,
            noise_sd=args.noise, seed=cfg.seed,
        )
    else:
        path = Path(selector)
        if not path.exists():
            raise ConfigError(f"dataset file not found: {path}")
        full = data.read_cifar_binary(str(path), num_classes=args.classes)
    return data.train_test_split(full, n_test=args.test_n, seed=cfg.seed + 1)


def _resolve_split(train_ds: data.Dataset, labels_arg: str, cfg: RunConfig) -> LabelSeed:
    labels_path = Path(labels_arg)
    if labels_path.exists():
        idx, labels = io.read_label_file(labels_path)
        if labels is None:
            labels = train_ds.labels[idx]
        mask = np.zeros(train_ds.n, dtype=bool)
        mask[idx] = True
        return LabelSeed(
            n=train_ds.n,
            num_classes=train_ds.num_classes,
            labelled_idx=idx,
            unlabelled_idx=np.flatnonzero(~mask),
            labels=labels,
        )
    try:
        n_labels = int(labels_arg)
    except ValueError as exc:
        raise ConfigError(f"--labels must be a count or an existing file: {labels_arg}") from exc
    return data.make_split(train_ds, data.SplitSpec(n_labelled=n_labels, seed=cfg.seed))


def _cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    if args.data:
        cfg = dataclasses.replace(cfg, dataset=args.data)
    if not cfg.dataset:
        raise ConfigError("no dataset given: pass --data or set 'dataset' in the config")
    out_dir = Path(args.out)
    train_ds, test_ds = _build_dataset(cfg.dataset, cfg, args)
    split = _resolve_split(train_ds, args.labels, cfg)
    _write_resolved(out_dir, {**cfg.to_dict(), "labels": args.labels, "out": str(out_dir)})
    result = trainer.train(cfg, train_ds, split, test_ds)
    io.write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    io.write_label_file(out_dir / "labelled_indices.txt", split.labelled_idx, split.labels)
    backbone.save_checkpoint(out_dir / "checkpoint.lpck", result.params, result.state)
    print(
        f"finished: {result.ssl_steps} steps over {result.epochs} epochs; "
        f"init test error {result.init_test_error}, final {result.final_test_error}"
    )
    return 0


def _cmd_propagate(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    if args.k is not None:
        cfg = dataclasses.replace(cfg, k=args.k)
    if args.mu is not None:
        cfg = dataclasses.replace(cfg, mu=args.mu)
    emb_path = Path(args.embeddings)
    if not emb_path.exists():
        raise ConfigError(f"embedding file not found: {emb_path}")
    V = (
        io.read_embeddings(emb_path)
        if emb_path.suffix == ".lpem"
        else io.read_embeddings_csv(emb_path)
    )
    idx, labels = io.read_label_file(args.labels)
    if labels is None:
        raise ConfigError(f"{args.labels}: propagate needs 'index,label' rows")
    num_classes = args.classes or int(labels.max())
    mask = np.zeros(V.shape[0], dtype=bool)
    mask[idx] = True
    seed = LabelSeed(
        n=V.shape[0],
        num_classes=num_classes,
        labelled_idx=idx,
        unlabelled_idx=np.flatnonzero(~mask),
        labels=labels,
    )
    prior = None
    if args.prior and args.prior != "uniform":
        prior = np.loadtxt(args.prior, delimiter=",")
    out_dir = Path(args.out)
    _write_resolved(
        out_dir,
        {**cfg.to_dict(), "embeddings": str(emb_path), "labels": args.labels,
         "classes": num_classes, "out": str(out_dir)},
    )
    result = trainer.propagate_labels(V, seed, cfg, prior=prior)
    io.write_pseudo_label_csv(
        out_dir / "pseudo_labels.csv", result.labels, result.scores.max(axis=1)
    )
    if args.export_graph:
        from .graph import build_knn_affinity

        io.write_edge_list(out_dir / "graph_edges.csv", build_knn_affinity(V, cfg.k))
    if not result.cg_converged:
        print("warning: conjugate gradient hit its iteration cap on some columns")
    print(f"wrote pseudo-labels for {V.shape[0]} samples to {out_dir / 'pseudo_labels.csv'}")
    return 0


def _cmd_augment_demo(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    out_dir = Path(args.out)
    _write_resolved(out_dir, {**cfg.to_dict(), "side": args.side, "out": str(out_dir)})
    policy = AugmentPolicy()
    demo = data.blob_images(4, num_classes=4, side=args.side, seed=cfg.seed)
    img = demo.inputs[int(derive_rng(cfg.seed, 0).integers(demo.n))]
    io.write_ppm(out_dir / "before.ppm", img)
    rng = derive_rng(cfg.seed, 1)
    io.write_ppm(
        out_dir / "after_labelled.ppm",
        raw_strong_augment(img, rng, policy, policy.ra_samples_labelled),
    )
    io.write_ppm(
        out_dir / "after_unlabelled.ppm",
        raw_strong_augment(img, rng, policy, policy.ra_samples_unlabelled),
    )
    for kind, bounds in TRANSFORM_RANGES.items():
        magnitude = None if bounds is None else bounds[1]
        io.write_ppm(
            out_dir / f"transform_{kind.lower()}.ppm",
            apply_transform(img, TransformSpec(kind, magnitude)),
        )
    print(f"wrote demo images under {out_dir}")
    return 0


def _cmd_invariance(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    params, _ = backbone.load_checkpoint(args.checkpoint)
    _, test_ds = _build_dataset(args.data, cfg, args)
    policy = AugmentPolicy()

    def strong(img, rng):
        return raw_strong_augment(img, rng, policy, policy.ra_samples_unlabelled)

    report = metrics.augmentation_invariance(
        params, test_ds, strong, trials=args.trials, seed=cfg.seed, policy=policy,
        description="strong unlabelled pipeline",
    )
    out_dir = Path(args.out)
    _write_resolved(out_dir, {**cfg.to_dict(), "checkpoint": args.checkpoint, "out": str(out_dir)})
    lines = [
        f"dataset: {report.dataset_tag}",
        f"augmentation: {report.augmentation}",
        f"trials per sample: {report.trials}",
        f"clean accuracy: {report.clean_accuracy:.6f}",
        f"augmented accuracy: {report.augmented_accuracy:.6f}",
        f"invariance ratio: {report.ratio:.6f}",
    ]
    (out_dir / "invariance.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _samplers(seed_width: float):
    return {
        "bernoulli": lambda rng, size: rng.integers(0, 2, size=size).astype(float),
        "clipped-gaussian": lambda rng, size: np.clip(
            rng.normal(0.5, seed_width, size=size), 0.0, 1.0
        ),
    }


def _cmd_hoeffding(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    sampler = _samplers(args.gaussian_sd)[args.sampler]
    report = metrics.hoeffding_check(
        sampler, n_a=args.na, epsilon=args.eps, trials=args.trials, seed=cfg.seed
    )
    out_dir = Path(args.out)
    _write_resolved(
        out_dir,
        {**cfg.to_dict(), "na": args.na, "eps": args.eps, "trials": args.trials,
         "sampler": args.sampler, "out": str(out_dir)},
    )
    lines = [
        f"sampler: {args.sampler}",
        f"n_a: {report.n_a}",
        f"epsilon: {report.epsilon}",
        f"range width: {report.range_width}",
        f"trials: {report.trials}",
        f"empirical tail: {report.empirical_tail:.6f}",
        f"theoretical bound: {report.theoretical_bound:.6f}",
        f"within bound: {report.within_bound}",
    ]
    (out_dir / "hoeffding.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_ablation(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    if args.data:
        cfg = dataclasses.replace(cfg, dataset=args.data)
    train_ds, test_ds = _build_dataset(cfg.dataset or "two-moons", cfg, args)
    split = _resolve_split(train_ds, args.labels, cfg)
    out_dir = Path(args.out)
    _write_resolved(out_dir, {**cfg.to_dict(), "epochs": args.epochs, "out": str(out_dir)})
    params, state = trainer.build_model(
        cfg, trainer.prepare_clean_inputs(train_ds, AugmentPolicy()).shape[1],
        train_ds.num_classes,
    )
    trainer.supervised_init(params, state, train_ds, split, cfg, AugmentPolicy())
    series = metrics.pseudo_label_ablation(
        params, state, train_ds, split, cfg, epochs=args.epochs
    )
    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write("epoch,graph_accuracy,network_accuracy\n")
        for e, g, n in zip(series.epochs, series.graph_accuracy, series.network_accuracy):
            fh.write(f"{e},{g},{n}\n")
    print(
        "graph vs network pseudo-label accuracy per epoch: "
        + "; ".join(
            f"epoch {e}: {g:.4f} vs {n:.4f}"
            for e, g, n in zip(series.epochs, series.graph_accuracy, series.network_accuracy)
        )
    )
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; keys mirror the hyperparameter table")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    p.add_argument("--out", default="labelprop-out", help="output directory")


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-n", type=int, default=1000, help="synthetic dataset size")
    p.add_argument("--test-n", type=int, default=200, help="held-out test samples")
    p.add_argument("--noise", type=float, default=0.1, help="synthetic noise level")
    p.add_argument("--classes", type=int, default=None, help="class count (CIFAR/blobs)")
    p.add_argument("--side", type=int, default=16, help="blob image side length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelprop",
        description="Graph label propagation trainer and analysis tools. Metrics CSV "
        "columns: step,epoch,lr,train_loss,pl_accuracy,test_error. Pseudo-label CSV "
        "columns: index,label,max_score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full training scheme")
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--data", help="two-moons | blob-images | path to CIFAR-format .bin")
    p.add_argument("--labels", required=True, help="labelled count or index file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("propagate", help="one-shot graph labelling of an embedding file")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help=".lpem binary or CSV embedding file")
    p.add_argument("--labels", required=True, help="file of 'index,label' rows (1-based classes)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--prior", default="uniform", help="'uniform' or CSV of class priors")
    p.add_argument("--export-graph", action="store_true", help="also write the edge list CSV")
    p.set_defaults(func=_cmd_propagate)

    p = sub.add_parser("augment-demo", help="write before/after PPM images")
    _add_common(p)
    p.add_argument("--side", type=int, default=32)
    p.set_defaults(func=_cmd_augment_demo)

    p = sub.add_parser("invariance", help="augmentation-invariance ratio of a checkpoint")
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=_cmd_invariance)

    p = sub.add_parser("hoeffding", help="Monte-Carlo check of the concentration bound")
    _add_common(p)
    p.add_argument("--na", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--sampler", choices=["bernoulli", "clipped-gaussian"], default="bernoulli")
    p.add_argument("--gaussian-sd", type=float, default=0.2)
    p.set_defaults(func=_cmd_hoeffding)

    p = sub.add_parser("ablation", help="graph vs network pseudo-label comparison")
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--data", help="dataset selector")
    p.add_argument("--labels", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=_cmd_ablation)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LabelPropError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
