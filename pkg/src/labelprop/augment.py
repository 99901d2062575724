"""Raster image augmentation: a 14-transform pool, CutOut, and the
labelled/unlabelled pipelines.

Images are HxWxC float arrays with values in [0, 1] and C in {1, 3}.
Every transform preserves shape and range.  Geometric transforms sample
the source image bilinearly and fill exposed pixels with mid-gray 0.5;
histogram transforms act on a 256-level quantization of [0, 1].  The
pipelines are pure functions of (image, rng state, policy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "TRANSFORM_RANGES",
    "TransformSpec",
    "AugmentPolicy",
    "apply_transform",
    "randaugment_sample",
    "cutout",
    "normalize_image",
    "raw_strong_augment",
    "labelled_pipeline",
    "unlabelled_pipeline",
    "derive_rng",
]

GRAY = 0.5

# Magnitude ranges for each pool member; None marks parameter-free kinds.
TRANSFORM_RANGES: dict[str, tuple[float, float] | None] = {
    "Autocontrast": None,
    "Brightness": (0.05, 0.95),
    "Color": (0.05, 0.95),
    "Contrast": (0.05, 0.95),
    "Equalise": None,
    "Identity": None,
    "Posterise": (4.0, 8.0),
    "Rotate": (-30.0, 30.0),
    "Sharpness": (0.05, 0.95),
    "ShearX": (-0.3, 0.3),
    "ShearY": (-0.3, 0.3),
    "Solarize": (0.0, 1.0),
    "TranslateX": (-0.3, 0.3),
    "TranslateY": (-0.3, 0.3),
}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    magnitude: float | None = None


@dataclass
class AugmentPolicy:
    """Pipeline composition: Table of pool kinds plus the fixed stage settings."""

    pool: tuple[str, ...] = tuple(TRANSFORM_RANGES)
    ra_samples_labelled: int = 1
    ra_samples_unlabelled: int = 2
    cutout_fraction_range: tuple[float, float] = (0.0, 0.5)
    crop_pad: int = 4
    flip_prob: float = 0.5
    norm_mean: tuple[float, ...] | float = 0.5
    norm_std: tuple[float, ...] | float = 0.5

    def __post_init__(self) -> None:
        unknown = [k for k in self.pool if k not in TRANSFORM_RANGES]
        if unknown:
            raise ConfigError(f"unknown transform kinds: {unknown}")
        lo, hi = self.cutout_fraction_range
        if not (0.0 <= lo <= hi <= 0.5):
            raise ConfigError("cutout fraction range must lie within [0, 0.5]")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InputError("image must be HxWxC with C in {1, 3}")
    return img


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def _blend(degenerate: np.ndarray, original: np.ndarray, m: float) -> np.ndarray:
    return np.clip(degenerate + m * (original - degenerate), 0.0, 1.0)


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / 9.0


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.int64)


def _equalise_channel(q: np.ndarray) -> np.ndarray:
    hist = np.bincount(q.reshape(-1), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = np.flatnonzero(hist)
    cdf_min = cdf[nonzero[0]]
    if cdf[-1] == cdf_min:  # constant channel
        return q
    lut = np.round((cdf - cdf_min) * 255.0 / (cdf[-1] - cdf_min)).astype(np.int64)
    return np.clip(lut[q], 0, 255)


def _affine_sample(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Bilinear pull-back: out[y, x] = img[matrix @ (x, y) + offset], gray fill.

    ``matrix``/``offset`` map destination (x, y) pixel coordinates to source
    coordinates.
    """
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    dest = np.stack([xs.ravel(), ys.ravel()])
    src = matrix @ dest.astype(np.float64) + offset[:, None]
    sx, sy = src[0], src[1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((h * w, img.shape[2]))
    for cx, cy, weight in (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ):
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        vals = np.full((h * w, img.shape[2]), GRAY)
        vals[valid] = img[cy[valid], cx[valid]]
        out += weight[:, None] * vals
    return np.clip(out.reshape(img.shape), 0.0, 1.0)


def _centered_affine(img: np.ndarray, linear: np.ndarray, shift_px: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    h, w = img.shape[:2]
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = center - linear @ center + np.asarray(shift_px, dtype=np.float64)
    return _affine_sample(img, linear, offset)


def apply_transform(img: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply one pool transform; magnitude must lie in the kind's range."""
    img = _check_image(img)
    if spec.kind not in TRANSFORM_RANGES:
        raise ConfigError(f"unknown transform kind {spec.kind!r}")
    rng_bounds = TRANSFORM_RANGES[spec.kind]
    m = spec.magnitude
    if rng_bounds is None:
        m = None
    else:
        if m is None:
            raise ConfigError(f"{spec.kind} requires a magnitude")
        if not (rng_bounds[0] <= m <= rng_bounds[1]):
            raise ConfigError(
                f"{spec.kind} magnitude {m} outside [{rng_bounds[0]}, {rng_bounds[1]}]"
            )

    kind = spec.kind
    if kind == "Identity":
        return img.copy()
    if kind == "Autocontrast":
        q = _quantize(img)
        out = img.copy()
        for c in range(img.shape[2]):
            lo, hi = q[:, :, c].min(), q[:, :, c].max()
            if hi > lo:
                out[:, :, c] = (q[:, :, c] - lo) / (hi - lo)
        return out
    if kind == "Equalise":
        q = _quantize(img)
        out = np.empty_like(img)
        for c in range(img.shape[2]):
            out[:, :, c] = _equalise_channel(q[:, :, c]) / 255.0
        return out
    if kind == "Brightness":
        return _blend(np.zeros_like(img), img, m)
    if kind == "Color":
        if img.shape[2] == 1:
            return img.copy()
        gray = _luminance(img)[:, :, None].repeat(3, axis=2)
        return _blend(gray, img, m)
    if kind == "Contrast":
        flat = np.full_like(img, _luminance(img).mean())
        return _blend(flat, img, m)
    if kind == "Sharpness":
        return _blend(_box_blur(img), img, m)
    if kind == "Posterise":
        bits = int(round(m))
        mask = (0xFF << (8 - bits)) & 0xFF
        return (_quantize(img) & mask) / 255.0
    if kind == "Solarize":
        return np.where(img > m, 1.0 - img, img)
    if kind == "Rotate":
        if m == 0.0:
            return img.copy()
        theta = np.deg2rad(m)
        linear = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        return _centered_affine(img, linear)
    if kind == "ShearX":
        if m == 0.0:
            return img.copy()
        return _centered_affine(img, np.array([[1.0, m], [0.0, 1.0]]))
    if kind == "ShearY":
        if m == 0.0:
            return img.copy()
        return _centered_affine(img, np.array([[1.0, 0.0], [m, 1.0]]))
    if kind == "TranslateX":
        if m == 0.0:
            return img.copy()
        return _centered_affine(img, np.eye(2), (m * img.shape[1], 0.0))
    if kind == "TranslateY":
        if m == 0.0:
            return img.copy()
        return _centered_affine(img, np.eye(2), (0.0, m * img.shape[0]))
    raise ConfigError(f"unhandled transform kind {kind!r}")  # pragma: no cover


def randaugment_sample(rng: np.random.Generator, policy: AugmentPolicy) -> TransformSpec:
    """Uniform kind from the pool, magnitude uniform over the kind's range."""
    if not policy.pool:
        raise ConfigError("augmentation pool is empty")
    kind = policy.pool[int(rng.integers(len(policy.pool)))]
    bounds = TRANSFORM_RANGES[kind]
    magnitude = None if bounds is None else float(rng.uniform(*bounds))
    return TransformSpec(kind=kind, magnitude=magnitude)


def cutout(img: np.ndarray, side_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Gray out a square patch (side = fraction of width), clipped at borders."""
    img = _check_image(img)
    if not (0.0 <= side_fraction <= 0.5):
        raise ConfigError("cutout side fraction must lie in [0, 0.5]")
    h, w = img.shape[:2]
    side = int(round(side_fraction * w))
    out = img.copy()
    if side <= 0:
        return out
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0 = max(cy - side // 2, 0)
    x0 = max(cx - side // 2, 0)
    out[y0 : min(cy - side // 2 + side, h), x0 : min(cx - side // 2 + side, w)] = GRAY
    return out


def normalize_image(img: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    mean = np.asarray(policy.norm_mean, dtype=np.float64)
    std = np.asarray(policy.norm_std, dtype=np.float64)
    return (img - mean) / std


def raw_strong_augment(
    img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy, ra_samples: int
) -> np.ndarray:
    """Flip, crop-with-pad, pool samples, CutOut; output stays in [0, 1]."""
    img = _check_image(img)
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        img = img[:, ::-1, :]
    if policy.crop_pad > 0:
        pad = policy.crop_pad
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        oy = int(rng.integers(2 * pad + 1))
        ox = int(rng.integers(2 * pad + 1))
        img = padded[oy : oy + img.shape[0], ox : ox + img.shape[1]]
    for _ in range(ra_samples):
        img = apply_transform(img, randaugment_sample(rng, policy))
    lo, hi = policy.cutout_fraction_range
    return cutout(img, float(rng.uniform(lo, hi)) if hi > lo else lo, rng)


def labelled_pipeline(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Flip, crop-with-pad, one pool sample, CutOut, then normalization."""
    return normalize_image(raw_strong_augment(img, rng, policy, policy.ra_samples_labelled), policy)


def unlabelled_pipeline(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Same as the labelled pipeline but with two pool samples."""
    return normalize_image(raw_strong_augment(img, rng, policy, policy.ra_samples_unlabelled), policy)


def derive_rng(*entropy: int) -> np.random.Generator:
    """Independent, reproducible stream keyed by (seed, epoch, sample, replica, ...)."""
    return np.random.default_rng(np.random.SeedSequence(entropy))
