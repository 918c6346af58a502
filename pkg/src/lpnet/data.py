"""IDX loading, variance normalization and class-major arrangement."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .state import ClassMatrix

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """One sample per column of ``samples``."""

    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.labels.shape[0]:
            raise ValueError(f"{self.samples.shape} samples vs {self.labels.shape[0]} labels")

    @property
    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.samples[:, idx], self.labels[idx])


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: unexpected EOF in header")
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    size = n * rows * cols
    if len(raw) < 16 + size:
        raise IdxFormatError(f"{path}: unexpected EOF ({len(raw) - 16} of {size} pixel bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=size, offset=16)
    # one image per column, each flattened row-major
    return pixels.reshape(n, rows * cols).T.astype(np.float64) / 255.0


def _parse_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: unexpected EOF in header")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw) < 8 + n:
        raise IdxFormatError(f"{path}: unexpected EOF ({len(raw) - 8} of {n} labels)")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> LabeledDataset:
    images = _parse_images(_read(images_path), images_path)
    labels = _parse_labels(_read(labels_path), labels_path)
    if images.shape[1] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[1]} images vs {labels.shape[0]} labels")
    return LabeledDataset(images, labels)


def write_idx(images: np.ndarray, labels, images_path, labels_path, shape=(28, 28)) -> None:
    """Write uint8 images (``n x rows x cols`` or one flattened image per column) and labels."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images.T.reshape(-1, *shape)
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def normalize_unit_variance(dataset: LabeledDataset, center: bool = False, per: str = "sample") -> LabeledDataset:
    """Scale to unit variance, per sample (each column) or over the whole dataset.

    The mean is left in place unless ``center`` is set.
    """
    X = dataset.samples
    if per == "sample":
        std = X.std(axis=0)
        bad = np.flatnonzero(std == 0)
        if bad.size:
            raise ValueError(f"zero-variance samples at columns {bad.tolist()}")
        out = (X - X.mean(axis=0)) / std if center else X / std
    elif per == "dataset":
        std = X.std()
        if std == 0:
            raise ValueError("dataset has zero variance")
        out = (X - X.mean()) / std if center else X / std
    else:
        raise ValueError(f"per must be 'sample' or 'dataset' (got {per!r})")
    return LabeledDataset(out, dataset.labels.copy())


def to_class_matrix(dataset: LabeledDataset, per_class: int) -> ClassMatrix:
    """First ``per_class`` samples of every class (stable order), class-major."""
    classes = np.unique(dataset.labels)
    cols = []
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < per_class:
            raise ValueError(f"class {int(c)} has {idx.size} samples, need {per_class}")
        cols.append(idx[:per_class])
    data = dataset.samples[:, np.concatenate(cols)] if cols else dataset.samples[:, :0]
    return ClassMatrix(data, len(classes), per_class, classes)


def export_csv(cm: ClassMatrix, path) -> None:
    """Debug dump: header ``class,k,f0..f{M-1}``, one row per sample."""
    M = cm.data.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "k"] + [f"f{i}" for i in range(M)])
        for c in range(cm.C):
            for k in range(cm.K):
                w.writerow([int(cm.classes[c]), k] + [repr(float(v)) for v in cm.column(c, k)])


def gaussian_classes(M: int, C: int, K: int, separation: float = 1.0, seed: int = 0) -> LabeledDataset:
    """``C`` isotropic unit-variance Gaussian clouds in ``M`` dimensions.

    Class means are drawn i.i.d. normal with standard deviation ``separation``,
    so the expected distance between two means is about ``separation * sqrt(2M)``.
    Samples are stored class after class.
    """
    if M < 1 or C < 1 or K < 1:
        raise ValueError(f"M, C and K must be >= 1 (got {M}, {C}, {K})")
    rng = np.random.default_rng(seed)
    means = separation * rng.standard_normal((M, C))
    X = np.repeat(means, K, axis=1) + rng.standard_normal((M, C * K))
    return LabeledDataset(X, np.repeat(np.arange(C), K))
