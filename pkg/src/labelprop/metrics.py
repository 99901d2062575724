"""Evaluation and analysis: top-1 error, augmentation invariance, the
graph-vs-network pseudo-label comparison, concentration-bound checks, and
the multi-sample variance study."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import backbone, trainer
from .augment import AugmentPolicy, derive_rng, unlabelled_pipeline
from .backbone import ClassifierParams, OptimizerState
from .data import Dataset
from .errors import InputError
from .graph import LabelSeed
from .trainer import RunConfig

__all__ = [
    "InvarianceReport",
    "HoeffdingReport",
    "AblationSeries",
    "top1_error",
    "augmentation_invariance",
    "pseudo_label_ablation",
    "hoeffding_bound",
    "hoeffding_check",
    "multisample_variance_study",
]


@dataclass
class InvarianceReport:
    """Accuracy ratio with and without augmentation (1.0 = fully invariant)."""

    ratio: float
    augmented_accuracy: float
    clean_accuracy: float
    dataset_tag: str
    augmentation: str
    trials: int


@dataclass
class HoeffdingReport:
    n_a: int
    epsilon: float
    range_width: float
    empirical_tail: float
    theoretical_bound: float
    trials: int
    monte_carlo_se: float

    @property
    def within_bound(self) -> bool:
        return self.empirical_tail <= self.theoretical_bound + 3.0 * self.monte_carlo_se


@dataclass
class AblationSeries:
    """Per-epoch pseudo-label accuracy for the two label sources."""

    epochs: list[int]
    graph_accuracy: list[float]
    network_accuracy: list[float]


def _predict(params: ClassifierParams, ds: Dataset, policy: AugmentPolicy) -> np.ndarray:
    logits = backbone.forward(params, trainer.prepare_clean_inputs(ds, policy)).logits
    return np.argmax(logits, axis=1).astype(np.int64) + 1


def top1_error(params: ClassifierParams, ds: Dataset, policy: AugmentPolicy | None = None) -> float:
    """Fraction of samples whose argmax prediction differs from the label."""
    if ds.n == 0:
        raise InputError("top1_error needs a nonempty dataset")
    policy = policy or AugmentPolicy()
    return float(np.mean(_predict(params, ds, policy) != ds.labels))


def augmentation_invariance(
    params: ClassifierParams,
    ds: Dataset,
    augment_fn,
    trials: int = 5,
    seed: int = 0,
    policy: AugmentPolicy | None = None,
    description: str = "",
) -> InvarianceReport:
    """Accuracy under ``augment_fn`` relative to clean accuracy.

    ``augment_fn(sample, rng)`` maps one raw input (image buffer or
    feature vector) to a same-shape input; the augmented accuracy averages
    over ``trials`` independent draws per sample.
    """
    policy = policy or AugmentPolicy()
    clean_acc = 1.0 - top1_error(params, ds, policy)
    if clean_acc <= 0.0:
        raise InputError("augmentation invariance is undefined at zero clean accuracy")
    hits = 0
    for t in range(trials):
        augmented = np.stack(
            [augment_fn(ds.inputs[i], derive_rng(seed, t, i)) for i in range(ds.n)]
        )
        aug_ds = Dataset(
            inputs=augmented, labels=ds.labels, num_classes=ds.num_classes, tag=ds.tag
        )
        hits += int(np.sum(_predict(params, aug_ds, policy) == ds.labels))
    aug_acc = hits / (trials * ds.n)
    return InvarianceReport(
        ratio=aug_acc / clean_acc,
        augmented_accuracy=aug_acc,
        clean_accuracy=clean_acc,
        dataset_tag=ds.tag,
        augmentation=description or getattr(augment_fn, "__name__", "custom"),
        trials=trials,
    )


def pseudo_label_ablation(
    params: ClassifierParams,
    state: OptimizerState,
    ds: Dataset,
    seed_split: LabelSeed,
    cfg: RunConfig,
    epochs: int = 1,
    policy: AugmentPolicy | None = None,
) -> AblationSeries:
    """Compare graph-propagated against network-argmax pseudo-labels.

    Both variants are evaluated on the same features each epoch (shared
    extraction, identical seeds); distribution alignment is off and n_a is
    forced to 1 for the comparison.  Between recordings the model trains
    one epoch on the graph labels, so the series tracks Algorithm-2-style
    progress; with ``epochs=1`` this is a pure single-shot comparison.
    """
    policy = policy or AugmentPolicy()
    cfg = dataclasses.replace(cfg, align=False, n_a=1)
    unl = seed_split.unlabelled_idx
    truth = ds.labels
    series = AblationSeries(epochs=[], graph_accuracy=[], network_accuracy=[])
    steps_per_epoch = max(unl.size // cfg.b_u, 1)
    labelled_stream = trainer._labelled_cycler(seed_split, cfg)
    for epoch in range(1, epochs + 1):
        features = trainer.extract_features(params, ds, policy)
        graphed = trainer.propagate_labels(features, seed_split, cfg)
        logits = backbone.forward(params, trainer.prepare_clean_inputs(ds, policy)).logits
        net_labels = np.argmax(logits, axis=1).astype(np.int64) + 1
        series.epochs.append(epoch)
        series.graph_accuracy.append(float(np.mean(graphed.labels[unl] == truth[unl])))
        series.network_accuracy.append(float(np.mean(net_labels[unl] == truth[unl])))
        if epoch == epochs:
            break
        graphed.epoch = epoch
        order = derive_rng(cfg.seed, trainer._STREAM_UNLABELLED_ORDER, epoch).permutation(unl)
        for step_i in range(steps_per_epoch):
            unl_batch = order[step_i * cfg.b_u : (step_i + 1) * cfg.b_u]
            if unl_batch.size < cfg.b_u:
                break
            batch_idx = np.concatenate([next(labelled_stream), unl_batch])
            is_labelled = np.zeros(batch_idx.size, dtype=bool)
            is_labelled[: cfg.b_l] = True
            trainer.ssl_step(
                params, state, ds, batch_idx, is_labelled, graphed, cfg, policy,
                epoch, step_i,
            )
    return series


def hoeffding_bound(n_a: int, epsilon: float, range_width: float) -> float:
    """Two-sided tail bound 2 exp(-2 n_a eps^2 / (b - a)^2) for bounded i.i.d. means."""
    return 2.0 * float(np.exp(-2.0 * n_a * epsilon**2 / range_width**2))


def hoeffding_check(
    sampler,
    n_a: int,
    epsilon: float,
    trials: int = 100_000,
    seed: int = 0,
    bounds: tuple[float, float] = (0.0, 1.0),
    mean_draws: int = 1_000_000,
) -> HoeffdingReport:
    """Monte-Carlo tail probability of an n_a-sample mean vs the bound.

    ``sampler(rng, size)`` must emit values inside ``bounds``; violations
    are a contract error.  The reference mean is estimated from
    ``mean_draws`` independent draws.
    """
    a, b = bounds
    if not b > a:
        raise InputError("bounds must satisfy a < b")
    rng = np.random.default_rng(np.random.SeedSequence((seed, n_a)))
    reference = np.asarray(sampler(rng, mean_draws), dtype=np.float64)
    draws = np.asarray(sampler(rng, trials * n_a), dtype=np.float64).reshape(trials, n_a)
    for block in (reference, draws.reshape(-1)):
        if block.min() < a or block.max() > b:
            raise InputError("sampler emitted a value outside its declared bounds")
    mu = float(reference.mean())
    tail_hits = np.abs(draws.mean(axis=1) - mu) > epsilon
    empirical = float(tail_hits.mean())
    se = float(np.sqrt(max(empirical * (1.0 - empirical), 1.0 / trials) / trials))
    return HoeffdingReport(
        n_a=n_a,
        epsilon=epsilon,
        range_width=b - a,
        empirical_tail=empirical,
        theoretical_bound=hoeffding_bound(n_a, epsilon, b - a),
        trials=trials,
        monte_carlo_se=se,
    )


def multisample_variance_study(
    params: ClassifierParams,
    ds: Dataset,
    n_a_values: list[int],
    cfg: RunConfig,
    policy: AugmentPolicy | None = None,
    trials: int = 200,
    max_samples: int = 32,
    seed: int = 0,
) -> dict[int, float]:
    """Variance of the n_a-averaged per-sample loss under augmentation draws.

    For each n_a, every probed sample's loss is averaged over n_a fresh
    augmentations; the variance of that average across ``trials`` repeats
    is reported (mean over samples).  For i.i.d. draws it scales like
    1 / n_a; deterministic pipelines give exactly zero.
    """
    policy = policy or AugmentPolicy()
    probe = np.arange(min(ds.n, max_samples))
    targets = trainer._one_hot(ds.labels[probe], ds.num_classes)
    out: dict[int, float] = {}
    for n_a in n_a_values:
        per_trial = np.empty((trials, probe.size))
        for t in range(trials):
            acc = np.zeros(probe.size)
            for j in range(n_a):
                if ds.is_image:
                    rows = np.stack(
                        [
                            unlabelled_pipeline(
                                ds.inputs[i], derive_rng(seed, n_a, t, j, int(i)), policy
                            ).reshape(-1)
                            for i in probe
                        ]
                    )
                else:
                    rows = ds.flat_inputs()[probe]
                logits = backbone.forward(params, rows).logits
                acc += -np.sum(targets * backbone.log_softmax(logits), axis=1)
            per_trial[t] = acc / n_a
        out[n_a] = float(per_trial.var(axis=0, ddof=1).mean())
    return out
