"""File formats: embedding files, split files, edge lists, PPM images, CSVs."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

__all__ = [
    "write_embeddings",
    "read_embeddings",
    "read_embeddings_csv",
    "write_edge_list",
    "read_label_file",
    "write_label_file",
    "write_ppm",
    "write_metrics_csv",
    "write_pseudo_label_csv",
]

EMBEDDING_MAGIC = b"LPEM"
EMBEDDING_VERSION = 1


def write_embeddings(path: str | Path, V: np.ndarray) -> None:
    """Little-endian binary: magic, u32 version, u64 n, u64 d, float32 rows."""
    V = np.asarray(V)
    if V.ndim != 2:
        raise InputError("embeddings must be 2-D")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQQ", EMBEDDING_VERSION, V.shape[0], V.shape[1]))
        fh.write(np.ascontiguousarray(V, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    header_size = 4 + 4 + 8 + 8
    with open(path, "rb") as fh:
        header = fh.read(header_size)
        if len(header) < header_size or header[:4] != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: not an embedding file (bad magic/header)")
        version, n, d = struct.unpack("<IQQ", header[4:])
        if version != EMBEDDING_VERSION:
            raise FormatError(f"{path}: unsupported embedding version {version}")
        payload = fh.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)


def read_embeddings_csv(path: str | Path) -> np.ndarray:
    V = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if not np.isfinite(V).all():
        raise FormatError(f"{path}: non-finite embedding values")
    return V


def write_edge_list(path: str | Path, affinity) -> None:
    """Debug export of stored edges as ``i,j,weight`` rows."""
    rows = np.repeat(
        np.arange(affinity.n, dtype=np.int64), np.diff(affinity.row_offsets)
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "weight"])
        for i, j, w in zip(rows, affinity.col_indices, affinity.values):
            writer.writerow([int(i), int(j), repr(float(w))])


def write_label_file(path: str | Path, indices: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Newline-separated labelled indices, optionally ``index,label`` pairs."""
    with open(path, "w") as fh:
        if labels is None:
            for i in indices:
                fh.write(f"{int(i)}\n")
        else:
            for i, y in zip(indices, labels):
                fh.write(f"{int(i)},{int(y)}\n")


def read_label_file(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a split file: lines are ``index`` or ``index,label`` (classes 1-based)."""
    indices: list[int] = []
    labels: list[int] = []
    with_labels = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) not in (1, 2):
                raise FormatError(f"{path}:{lineno}: expected 'index' or 'index,label'")
            if with_labels is None:
                with_labels = len(parts) == 2
            elif with_labels != (len(parts) == 2):
                raise FormatError(f"{path}:{lineno}: mixed labelled/unlabelled rows")
            try:
                indices.append(int(parts[0]))
                if with_labels:
                    labels.append(int(parts[1]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    idx = np.asarray(indices, dtype=np.int64)
    return idx, (np.asarray(labels, dtype=np.int64) if with_labels else None)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6) from an HxWx{1,3} image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise InputError("PPM writer needs an HxWx1 or HxWx3 image")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    fieldnames = ["step", "epoch", "lr", "train_loss", "pl_accuracy", "test_error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def write_pseudo_label_csv(path: str | Path, labels: np.ndarray, scores: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "max_score"])
        for i, (lab, sc) in enumerate(zip(labels, scores)):
            writer.writerow([i, int(lab), repr(float(sc))])
