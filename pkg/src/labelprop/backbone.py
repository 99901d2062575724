"""A small trainable classifier f = g(z(x)): plain MLP with manual backprop.

The embedding function z is the stack of hidden layers (ReLU, optionally
followed by l2 normalization of its output); the head g is the remaining
linear layer(s) producing logits.  Training uses Nesterov-momentum SGD
with weight decay folded into the gradient and a cosine learning-rate
decay that reaches zero at a fixed step horizon.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, NumericalError

__all__ = [
    "ClassifierParams",
    "ForwardResult",
    "Gradients",
    "OptimizerState",
    "init_classifier",
    "forward",
    "embed",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "backward",
    "mixup",
    "init_optimizer",
    "learning_rate",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]

NORM_EPS_SQ = 1e-24
CHECKPOINT_MAGIC = b"LPCK"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierParams:
    """Layer weights/biases with the cut index separating z from g."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embed_cut: int
    l2_normalize: bool = True

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def embedding_dim(self) -> int:
        return self.weights[self.embed_cut - 1].shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            embed_cut=self.embed_cut,
            l2_normalize=self.l2_normalize,
        )


@dataclass
class ForwardResult:
    embeddings: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def init_classifier(
    layer_dims: list[int],
    seed: int = 0,
    embed_cut: int | None = None,
    l2_normalize: bool = True,
) -> ClassifierParams:
    """He-style uniform fan-in initialization; biases start at zero."""
    if len(layer_dims) < 2:
        raise InputError("need at least an input and an output dimension")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    cut = len(weights) - 1 if embed_cut is None else embed_cut
    if not (1 <= cut <= len(weights)):
        raise InputError("embed_cut must name a layer boundary inside the network")
    return ClassifierParams(weights=weights, biases=biases, embed_cut=cut, l2_normalize=l2_normalize)


def _forward_trace(params: ClassifierParams, X: np.ndarray):
    """All intermediate activations, for reuse by the backward pass."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[0]:
        raise InputError(
            f"inputs must be (batch, {params.weights[0].shape[0]}), got {X.shape}"
        )
    acts = [X]
    inv_norm = None
    a = X
    for layer in range(params.num_layers):
        pre = a @ params.weights[layer] + params.biases[layer]
        last = layer == params.num_layers - 1
        a = pre if last else np.maximum(pre, 0.0)
        if layer == params.embed_cut - 1 and params.l2_normalize and not last:
            inv_norm = 1.0 / np.sqrt(np.einsum("ij,ij->i", a, a) + NORM_EPS_SQ)
            a = a * inv_norm[:, None]
        acts.append(a)
    return acts, inv_norm


def forward(params: ClassifierParams, X: np.ndarray) -> ForwardResult:
    """Embeddings (activations at the cut), logits, and softmax probabilities."""
    acts, _ = _forward_trace(params, X)
    logits = acts[-1]
    return ForwardResult(
        embeddings=acts[params.embed_cut], logits=logits, probabilities=softmax(logits)
    )


def embed(params: ClassifierParams, X: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """z(x) for every row, evaluated in batches."""
    X = np.asarray(X, dtype=np.float64)
    chunks = [
        _forward_trace(params, X[i : i + batch_size])[0][params.embed_cut]
        for i in range(0, X.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean of -sum_c target_c * log softmax(logits)_c over the batch.

    Takes logits rather than probabilities so the log-sum-exp form guards
    against underflow; targets may be one-hot or soft rows summing to 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise InputError("logits and targets must have matching shapes")
    return float(-np.sum(targets * log_softmax(logits)) / logits.shape[0])


def backward(params: ClassifierParams, X: np.ndarray, targets: np.ndarray) -> Gradients:
    """Analytic gradients of the mean cross-entropy w.r.t. every parameter."""
    acts, inv_norm = _forward_trace(params, X)
    targets = np.asarray(targets, dtype=np.float64)
    batch = X.shape[0]
    delta = (softmax(acts[-1]) - targets) / batch
    grads_w = [np.empty(0)] * params.num_layers
    grads_b = [np.empty(0)] * params.num_layers
    for layer in range(params.num_layers - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        delta = delta @ params.weights[layer].T
        post = acts[layer]
        if layer == params.embed_cut and params.l2_normalize and inv_norm is not None:
            # Back through y = h / ||h||: dL/dh = (g - y (y . g)) * inv_norm;
            # the sign pattern of y matches h, so the ReLU mask can use y.
            dot = np.einsum("ij,ij->i", delta, post)
            delta = (delta - post * dot[:, None]) * inv_norm[:, None]
        delta = delta * (post > 0.0)
    return Gradients(weights=grads_w, biases=grads_b)


def mixup(
    inputs_a: np.ndarray,
    targets_a: np.ndarray,
    inputs_b: np.ndarray,
    targets_b: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex combination of two batches with lambda ~ Beta(alpha, alpha).

    One lambda is drawn per call (per batch); ``lam`` overrides the draw.
    """
    if inputs_a.shape != inputs_b.shape or targets_a.shape != targets_b.shape:
        raise InputError("mixup batches must have identical shapes")
    if lam is None:
        if alpha <= 0:
            raise InputError("mixup alpha must be positive")
        lam = float(rng.beta(alpha, alpha))
    mixed_x = lam * inputs_a + (1.0 - lam) * inputs_b
    mixed_y = lam * targets_a + (1.0 - lam) * targets_b
    return mixed_x, mixed_y, lam


@dataclass
class OptimizerState:
    """Nesterov-momentum SGD state with a cosine-decayed learning rate."""

    velocities_w: list[np.ndarray]
    velocities_b: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.03
    step: int = 0
    horizon: int = 255000


def init_optimizer(
    params: ClassifierParams,
    base_lr: float = 0.03,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    horizon: int = 255000,
) -> OptimizerState:
    if not (0.0 <= momentum < 1.0):
        raise InputError("momentum must lie in [0, 1)")
    return OptimizerState(
        velocities_w=[np.zeros_like(w) for w in params.weights],
        velocities_b=[np.zeros_like(b) for b in params.biases],
        momentum=momentum,
        weight_decay=weight_decay,
        base_lr=base_lr,
        horizon=horizon,
    )


def learning_rate(state: OptimizerState, step: int | None = None) -> float:
    """base_lr * cos((pi/2) * min(s, H) / H): starts at base_lr, hits 0 at H."""
    s = state.step if step is None else step
    frac = min(s, state.horizon) / state.horizon
    return state.base_lr * float(np.cos(0.5 * np.pi * frac))


def sgd_step(params: ClassifierParams, grads: Gradients, state: OptimizerState) -> None:
    """One in-place Nesterov update; rejects non-finite gradients.

    With weight decay added to the gradient:
        g <- g + wd * theta
        v <- momentum * v + g
        theta <- theta - lr * (g + momentum * v)
    """
    for g in grads.weights + grads.biases:
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient; step rejected")
    lr = learning_rate(state)
    for w, g, v in zip(params.weights, grads.weights, state.velocities_w):
        g = g + state.weight_decay * w
        v *= state.momentum
        v += g
        w -= lr * (g + state.momentum * v)
    for b, g, v in zip(params.biases, grads.biases, state.velocities_b):
        v *= state.momentum
        v += g
        b -= lr * (g + state.momentum * v)
    state.step += 1


def save_checkpoint(path: str | Path, params: ClassifierParams, state: OptimizerState) -> None:
    """Little-endian binary: magic, version, shape table, f32 parameters, f32 velocities."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIB",
                CHECKPOINT_VERSION,
                params.num_layers,
                params.embed_cut,
                int(params.l2_normalize),
            )
        )
        for w in params.weights:
            fh.write(struct.pack("<QQ", *w.shape))
        fh.write(
            struct.pack(
                "<dddQQ",
                state.base_lr,
                state.momentum,
                state.weight_decay,
                state.step,
                state.horizon,
            )
        )
        for arr in (*params.weights, *params.biases, *state.velocities_w, *state.velocities_b):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ClassifierParams, OptimizerState]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, n_layers, cut, l2flag = struct.unpack("<IIIB", fh.read(13))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        shapes = [struct.unpack("<QQ", fh.read(16)) for _ in range(n_layers)]
        base_lr, momentum, weight_decay, step, horizon = struct.unpack("<dddQQ", fh.read(40))

        def read_arrays(shape_list):
            out = []
            for shape in shape_list:
                count = int(np.prod(shape))
                buf = fh.read(count * 4)
                if len(buf) != count * 4:
                    raise FormatError(f"{path}: truncated parameter block")
                out.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64))
            return out

        weights = read_arrays(shapes)
        biases = read_arrays([(s[1],) for s in shapes])
        vel_w = read_arrays(shapes)
        vel_b = read_arrays([(s[1],) for s in shapes])
    params = ClassifierParams(
        weights=weights, biases=biases, embed_cut=cut, l2_normalize=bool(l2flag)
    )
    state = OptimizerState(
        velocities_w=vel_w,
        velocities_b=vel_b,
        momentum=momentum,
        weight_decay=weight_decay,
        base_lr=base_lr,
        step=int(step),
        horizon=int(horizon),
    )
    return params, state
