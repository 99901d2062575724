"""Training orchestration: supervised initialization, per-epoch graph
pseudo-labelling, and composite-batch multi-sample optimization.

One epoch is one pass through the unlabelled data.  Every epoch refreshes
pseudo-labels by extracting unaugmented features, propagating seed labels
over the kNN graph, and aligning the scores to the prior; the inner loop
then takes floor(n_u / b_u) optimizer steps on composite batches of b_l
labelled and b_u pseudo-labelled samples, each sample replicated n_a
times through its augmentation pipeline under a single cross-entropy
loss.  All randomness derives from the run seed, so results do not depend
on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import backbone
from .align import AlignConfig, smooth_align, uniform_prior
from .augment import (
    AugmentPolicy,
    derive_rng,
    labelled_pipeline,
    normalize_image,
    unlabelled_pipeline,
)
from .backbone import ClassifierParams, OptimizerState
from .data import Dataset
from .errors import ConfigError, NumericalError
from .graph import (
    LabelSeed,
    PropagationConfig,
    build_knn_affinity,
    build_label_matrix,
    extract_pseudo_labels,
    normalize_affinity,
    solve_propagation,
)

__all__ = [
    "RunConfig",
    "PseudoLabels",
    "StepResult",
    "TrainResult",
    "build_model",
    "prepare_clean_inputs",
    "extract_features",
    "propagate_labels",
    "supervised_init",
    "pseudo_label_epoch",
    "ssl_step",
    "train",
]

# Stream tags keep derived RNG keys for distinct purposes disjoint.
_STREAM_INIT = 1
_STREAM_LABELLED_POOL = 2
_STREAM_UNLABELLED_ORDER = 3
_STREAM_AUGMENT = 4
_STREAM_MIXUP = 5
_STREAM_MODEL = 6


@dataclass
class RunConfig:
    """Hyperparameters; single-letter names mirror the config-file keys."""

    alpha: float = 1.0
    mu: float = 0.01
    k: int = 50
    S: int = 250_000
    b: int = 300
    b_l: int = 48
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    n_a: int = 3
    align_T: int = 10
    clip_lo: float = 0.99
    clip_hi: float = 1.01
    cg_tol: float = 1e-6
    cg_max_iter: int = 1000
    degree_epsilon: float = 1e-12
    lr_horizon: int = 255_000
    init_passes: int = 100
    hidden_dims: tuple[int, ...] = (128, 128)
    l2_normalize: bool = True
    mixup: bool = True
    align: bool = True
    graph_pseudo_labels: bool = True
    seed: int = 0
    dataset: str = ""

    def __post_init__(self) -> None:
        if self.b_l >= self.b:
            raise ConfigError("b_l must be smaller than b")
        if self.n_a < 1:
            raise ConfigError("n_a must be at least 1")
        if self.S < 1:
            raise ConfigError("S must be at least 1")

    @property
    def b_u(self) -> int:
        return self.b - self.b_l

    def propagation(self) -> PropagationConfig:
        return PropagationConfig(
            k=self.k,
            mu=self.mu,
            cg_tol=self.cg_tol,
            cg_max_iter=self.cg_max_iter,
            degree_epsilon=self.degree_epsilon,
        )

    def alignment(self) -> AlignConfig:
        return AlignConfig(max_iter=self.align_T, clip_lo=self.clip_lo, clip_hi=self.clip_hi)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        return out


@dataclass
class PseudoLabels:
    """Current pseudo-labels plus the epoch they were produced in."""

    labels: np.ndarray
    epoch: int
    scores: np.ndarray
    degenerate_rows: int
    cg_converged: bool


@dataclass
class StepResult:
    loss: float
    replicas: int
    lr: float


@dataclass
class TrainResult:
    params: ClassifierParams
    state: OptimizerState
    metrics: list[dict]
    ssl_steps: int
    epochs: int
    init_test_error: float | None
    final_test_error: float | None


def build_model(cfg: RunConfig, input_dim: int, num_classes: int) -> tuple[ClassifierParams, OptimizerState]:
    dims = [input_dim, *cfg.hidden_dims, num_classes]
    model_seed = int(derive_rng(cfg.seed, _STREAM_MODEL).integers(2**31))
    params = backbone.init_classifier(dims, seed=model_seed, l2_normalize=cfg.l2_normalize)
    state = backbone.init_optimizer(
        params,
        base_lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        horizon=cfg.lr_horizon,
    )
    return params, state


def prepare_clean_inputs(ds: Dataset, policy: AugmentPolicy) -> np.ndarray:
    """Model-ready rows without augmentation: images are normalized and flattened."""
    if ds.is_image:
        return normalize_image(ds.inputs, policy).reshape(ds.n, -1)
    return ds.flat_inputs()


def extract_features(params: ClassifierParams, ds: Dataset, policy: AugmentPolicy) -> np.ndarray:
    """Embeddings for the whole dataset; no augmentation is applied here."""
    return backbone.embed(params, prepare_clean_inputs(ds, policy))


def propagate_labels(
    features: np.ndarray,
    seed: LabelSeed,
    cfg: RunConfig,
    prior: np.ndarray | None = None,
) -> PseudoLabels:
    """kNN graph -> normalize -> damped CG solve -> alignment -> argmax."""
    prop_cfg = cfg.propagation()
    affinity = normalize_affinity(
        build_knn_affinity(features, cfg.k), degree_epsilon=cfg.degree_epsilon
    )
    Y = build_label_matrix(seed)
    result = solve_propagation(affinity, Y, prop_cfg)
    F = result.F
    degenerate = 0
    if cfg.align:
        aligned = smooth_align(
            F,
            uniform_prior(seed.num_classes) if prior is None else prior,
            seed.labelled_idx,
            seed.unlabelled_idx,
            cfg.alignment(),
        )
        F = aligned.F
        degenerate = aligned.degenerate_rows
    labels, zero_rows = extract_pseudo_labels(F, seed)
    return PseudoLabels(
        labels=labels,
        epoch=0,
        scores=F,
        degenerate_rows=degenerate + zero_rows,
        cg_converged=result.all_converged,
    )


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


def _augmented_rows(
    ds: Dataset,
    indices: np.ndarray,
    is_labelled: np.ndarray,
    cfg: RunConfig,
    policy: AugmentPolicy,
    epoch: int,
    slot_offset: int,
) -> np.ndarray:
    """One replica set: every sample through its pipeline with a derived stream.

    Vector datasets have no augmentation substrate, so their rows pass
    through unchanged and replicas coincide.
    """
    if not ds.is_image:
        return ds.flat_inputs()[indices]
    rows = np.empty((indices.size, ds.inputs[0].size))
    for pos, (idx, lab) in enumerate(zip(indices, is_labelled)):
        rng = derive_rng(cfg.seed, _STREAM_AUGMENT, epoch, slot_offset + pos)
        pipeline = labelled_pipeline if lab else unlabelled_pipeline
        rows[pos] = pipeline(ds.inputs[idx], rng, policy).reshape(-1)
    return rows


def _sgd_batch(
    params: ClassifierParams,
    state: OptimizerState,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: RunConfig,
    mixup_rng: np.random.Generator,
) -> float:
    if cfg.mixup:
        perm = mixup_rng.permutation(inputs.shape[0])
        inputs, targets, _ = backbone.mixup(
            inputs, targets, inputs[perm], targets[perm], cfg.alpha, mixup_rng
        )
    loss = backbone.cross_entropy(backbone.forward(params, inputs).logits, targets)
    grads = backbone.backward(params, inputs, targets)
    backbone.sgd_step(params, grads, state)
    return loss


def supervised_init(
    params: ClassifierParams,
    state: OptimizerState,
    ds: Dataset,
    seed: LabelSeed,
    cfg: RunConfig,
    policy: AugmentPolicy,
) -> dict:
    """Exactly ``cfg.init_passes`` passes over the labelled set.

    Uses the labelled augmentation pipeline, MixUp, and batches of
    min(b, n_l).
    """
    n_l = seed.labelled_idx.size
    if n_l < 1:
        raise ConfigError("supervised initialization needs at least one label")
    batch = min(cfg.b, n_l)
    targets_by_idx = dict(zip(seed.labelled_idx.tolist(), seed.labels.tolist()))
    order_rng = derive_rng(cfg.seed, _STREAM_INIT)
    passes = 0
    steps = 0
    last_loss = float("nan")
    for pass_i in range(cfg.init_passes):
        order = order_rng.permutation(seed.labelled_idx)
        for start in range(0, n_l, batch):
            chunk = order[start : start + batch]
            labels = np.array([targets_by_idx[int(i)] for i in chunk], dtype=np.int64)
            rows = _augmented_rows(
                ds,
                chunk,
                np.ones(chunk.size, dtype=bool),
                cfg,
                policy,
                epoch=-1 - pass_i,
                slot_offset=start,
            )
            targets = _one_hot(labels, ds.num_classes)
            mixup_rng = derive_rng(cfg.seed, _STREAM_MIXUP, pass_i, start)
            last_loss = _sgd_batch(params, state, rows, targets, cfg, mixup_rng)
            if not np.isfinite(last_loss):
                raise NumericalError(f"supervised init diverged at pass {pass_i}")
            steps += 1
        passes += 1
    return {"passes": passes, "steps": steps, "final_loss": last_loss}


def pseudo_label_epoch(
    params: ClassifierParams,
    ds: Dataset,
    seed: LabelSeed,
    cfg: RunConfig,
    policy: AugmentPolicy,
    epoch: int,
    prior: np.ndarray | None = None,
) -> PseudoLabels:
    """Refresh pseudo-labels from unaugmented features of the current model.

    With ``cfg.graph_pseudo_labels`` off, unlabelled samples instead take
    the network's own argmax prediction (the ablation variant); labelled
    samples always keep their ground truth.
    """
    features = extract_features(params, ds, policy)
    if cfg.graph_pseudo_labels:
        result = propagate_labels(features, seed, cfg, prior=prior)
        result.epoch = epoch
        return result
    logits = backbone.forward(params, prepare_clean_inputs(ds, policy)).logits
    labels = np.argmax(logits, axis=1).astype(np.int64) + 1
    labels[seed.labelled_idx] = seed.labels
    return PseudoLabels(
        labels=labels, epoch=epoch, scores=logits, degenerate_rows=0, cg_converged=True
    )


def ssl_step(
    params: ClassifierParams,
    state: OptimizerState,
    ds: Dataset,
    batch_idx: np.ndarray,
    is_labelled: np.ndarray,
    pseudo: PseudoLabels,
    cfg: RunConfig,
    policy: AugmentPolicy,
    epoch: int,
    step_in_epoch: int,
) -> StepResult:
    """One optimizer step on a composite batch with n_a replicas per sample."""
    if pseudo.epoch != epoch:
        raise ConfigError(
            f"stale pseudo-labels: stamped epoch {pseudo.epoch}, current {epoch}"
        )
    lr_before = backbone.learning_rate(state)
    replica_inputs = []
    targets = _one_hot(pseudo.labels[batch_idx], ds.num_classes)
    replica_targets = []
    for replica in range(cfg.n_a):
        slot = (step_in_epoch * cfg.n_a + replica) * cfg.b
        replica_inputs.append(
            _augmented_rows(ds, batch_idx, is_labelled, cfg, policy, epoch, slot)
        )
        replica_targets.append(targets)
    inputs = np.concatenate(replica_inputs, axis=0)
    all_targets = np.concatenate(replica_targets, axis=0)
    mixup_rng = derive_rng(cfg.seed, _STREAM_MIXUP, epoch, step_in_epoch)
    loss = _sgd_batch(params, state, inputs, all_targets, cfg, mixup_rng)
    if not np.isfinite(loss):
        raise NumericalError(f"training loss diverged at epoch {epoch}")
    return StepResult(loss=loss, replicas=inputs.shape[0], lr=lr_before)


def _test_error(params: ClassifierParams, ds: Dataset, policy: AugmentPolicy) -> float:
    logits = backbone.forward(params, prepare_clean_inputs(ds, policy)).logits
    predicted = np.argmax(logits, axis=1) + 1
    return float(np.mean(predicted != ds.labels))


def _labelled_cycler(seed: LabelSeed, cfg: RunConfig):
    """Endless reshuffled stream over the labelled pool (oversamples small n_l)."""
    rng = derive_rng(cfg.seed, _STREAM_LABELLED_POOL)
    pool: list[int] = []
    while True:
        if len(pool) < cfg.b_l:
            pool.extend(rng.permutation(seed.labelled_idx).tolist())
        yield np.array(pool[: cfg.b_l], dtype=np.int64)
        del pool[: cfg.b_l]


def train(
    cfg: RunConfig,
    train_ds: Dataset,
    seed_split: LabelSeed,
    test_ds: Dataset | None = None,
    policy: AugmentPolicy | None = None,
    prior: np.ndarray | None = None,
) -> TrainResult:
    """Full training scheme: supervised init, then alternate pseudo-label
    refreshes with composite-batch optimization until at least S steps ran."""
    policy = policy or AugmentPolicy()
    n_u = seed_split.unlabelled_idx.size
    if n_u < cfg.b_u:
        raise ConfigError("unlabelled set is smaller than the unlabelled batch size")
    steps_per_epoch = n_u // cfg.b_u

    params, state = build_model(
        cfg, prepare_clean_inputs(train_ds, policy).shape[1], train_ds.num_classes
    )
    init_info = supervised_init(params, state, train_ds, seed_split, cfg, policy)
    init_error = _test_error(params, test_ds, policy) if test_ds is not None else None

    metrics: list[dict] = [
        {
            "step": 0,
            "epoch": 0,
            "lr": backbone.learning_rate(state),
            "train_loss": init_info["final_loss"],
            "pl_accuracy": "",
            "test_error": init_error if init_error is not None else "",
        }
    ]
    labelled_stream = _labelled_cycler(seed_split, cfg)
    unl = seed_split.unlabelled_idx
    truth = train_ds.labels

    ssl_steps = 0
    epoch = 0
    loss = float("nan")
    while ssl_steps < cfg.S:
        epoch += 1
        pseudo = pseudo_label_epoch(params, train_ds, seed_split, cfg, policy, epoch, prior)
        pl_accuracy = float(np.mean(pseudo.labels[unl] == truth[unl]))
        order = derive_rng(cfg.seed, _STREAM_UNLABELLED_ORDER, epoch).permutation(unl)
        for step_i in range(steps_per_epoch):
            unl_batch = order[step_i * cfg.b_u : (step_i + 1) * cfg.b_u]
            lab_batch = next(labelled_stream)
            batch_idx = np.concatenate([lab_batch, unl_batch])
            is_labelled = np.zeros(cfg.b, dtype=bool)
            is_labelled[: cfg.b_l] = True
            result = ssl_step(
                params, state, train_ds, batch_idx, is_labelled, pseudo, cfg, policy,
                epoch, step_i,
            )
            loss = result.loss
            ssl_steps += 1
        metrics.append(
            {
                "step": ssl_steps,
                "epoch": epoch,
                "lr": backbone.learning_rate(state),
                "train_loss": loss,
                "pl_accuracy": pl_accuracy,
                "test_error": _test_error(params, test_ds, policy)
                if test_ds is not None
                else "",
            }
        )
    return TrainResult(
        params=params,
        state=state,
        metrics=metrics,
        ssl_steps=ssl_steps,
        epochs=epoch,
        init_test_error=init_error,
        final_test_error=metrics[-1]["test_error"] if test_ds is not None else None,
    )
