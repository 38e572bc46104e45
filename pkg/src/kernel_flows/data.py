"""Datasets: the two-spiral Swiss Roll, IDX image/label files and helpers."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import BadMagic, ConfigError, DimensionOverflow, TruncatedFile, ZeroVector
from .flow import distance_metrics

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
# a single IDX payload above this many bytes is rejected rather than allocated
MAX_IDX_BYTES = 1 << 34


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise ValueError("points must be (N, d) with one label per point")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def onehot(self) -> np.ndarray:
        return one_hot(self.labels, self.n_classes)

    @property
    def signed(self) -> np.ndarray:
        """Scalar labels +1 / -1 for two-class data (class 1 is +1)."""
        if self.n_classes != 2:
            raise ValueError("signed labels need exactly two classes")
        return np.where(self.labels == 1, 1.0, -1.0)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.points[idx], self.labels[idx], self.n_classes, self.source)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.eye(n_classes)[labels]


def swiss_roll(n: int, jitter: float = 0.0, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Two interlocked spirals with ``n / 2`` points each.

    Class 1 (label +1) sits at ``(t / pi) (cos t, sin t)`` for ``t`` evenly
    spaced in ``[pi, 4.5 pi]``; class 0 (label -1) is its negation. ``jitter``
    adds uniform noise in ``[-jitter, jitter]`` to every coordinate.
    """
    if n < 2 or n % 2:
        raise ConfigError(f"Swiss Roll needs an even N >= 2, got {n}")
    m = n // 2
    t = np.linspace(np.pi, 4.5 * np.pi, m)
    pos = (t / np.pi)[:, None] * np.column_stack([np.cos(t), np.sin(t)])
    X = np.vstack([pos, -pos])
    if jitter:
        if rng is None:
            rng = np.random.default_rng(0)
        X = X + rng.uniform(-jitter, jitter, X.shape)
    labels = np.concatenate([np.ones(m, dtype=int), np.zeros(m, dtype=int)])
    return Dataset(X, labels, 2, source="swiss-roll")


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expect: Optional[int] = None) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (3-D images or 1-D labels).

    Gzipped files are detected by their header.
    """
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: missing magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC) or (expect is not None and magic != expect):
        raise BadMagic(f"{path}: unexpected magic 0x{magic:08x}")
    ndim = 3 if magic == IMAGES_MAGIC else 1
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFile(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])
    total = 1
    for d in dims:
        total *= d
    if total > MAX_IDX_BYTES:
        raise DimensionOverflow(f"{path}: dims {dims} describe {total} bytes")
    payload = len(buf) - 4 - 4 * ndim
    if payload < total:
        raise TruncatedFile(f"{path}: expected {total} data bytes, found {payload}")
    if payload > total:
        raise TruncatedFile(f"{path}: {payload - total} trailing bytes after data")
    return np.frombuffer(buf, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims).copy()


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 data")
    if a.ndim == 3:
        magic = IMAGES_MAGIC
    elif a.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    """Load an MNIST-format split; pixels become float rows of length 784."""
    img_name, lab_name = MNIST_FILES[split]
    images = read_idx(_find(directory, img_name), IMAGES_MAGIC)
    labels = read_idx(_find(directory, lab_name), LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(float)
    return Dataset(X, labels.astype(int), 10, source=f"idx:{directory}:{split}")


def normalize_l2(points) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ZeroVector(f"row {int(np.argmin(norms))} has zero norm")
    return X / norms[:, None]


def gamma_heuristic(points, method: str = "exact", seed: int = 0) -> float:
    """``1 / mean squared pairwise distance``."""
    X = np.asarray(points, dtype=float)
    if len(X) < 2:
        raise ValueError("need at least two points")
    ms = distance_metrics(X, np.zeros(len(X), dtype=int), method=method, seed=seed).all
    if not ms > 0:
        raise ZeroVector("all points coincide")
    return 1.0 / ms


def filter_classes(data: Dataset, classes) -> Dataset:
    """Keep only ``classes``, relabelled ``0..len(classes)-1`` in the given order."""
    classes = list(classes)
    mask = np.isin(data.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in data.labels[mask]], dtype=int)
    return Dataset(data.points[mask], labels, len(classes), data.source)


def select_subset(data: Dataset, n: int, balanced: bool = False,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``n`` indices without replacement, optionally ``n / classes`` per class."""
    if rng is None:
        rng = np.random.default_rng(0)
    if not 0 < n <= len(data):
        raise ConfigError(f"cannot select {n} of {len(data)} points")
    if not balanced:
        return np.sort(rng.choice(len(data), n, replace=False))
    if n % data.n_classes:
        raise ConfigError(f"balanced subset of {n} is not divisible by {data.n_classes} classes")
    per = n // data.n_classes
    out = []
    for c in range(data.n_classes):
        pool = np.flatnonzero(data.labels == c)
        if len(pool) < per:
            raise ConfigError(f"class {c} has {len(pool)} points, need {per}")
        out.append(rng.choice(pool, per, replace=False))
    return np.sort(np.concatenate(out))


def split_train_test(data: Dataset, n_train: int, n_test: int,
                     rng: Optional[np.random.Generator] = None,
                     balanced: bool = True) -> Tuple[Dataset, Dataset]:
    """Disjoint train / test draws from one pool (used when a single file holds both)."""
    if rng is None:
        rng = np.random.default_rng(0)
    train = select_subset(data, n_train, balanced, rng)
    rest = data.subset(np.setdiff1d(np.arange(len(data)), train))
    test = select_subset(rest, n_test, balanced, rng)
    return data.subset(train), rest.subset(test)


def export_csv(path, points, labels) -> None:
    """Rows ``index, label, x_0, ..., x_{d-1}``."""
    X = np.asarray(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"] + [f"x{j}" for j in range(X.shape[1])])
        for i, (x, y) in enumerate(zip(X, np.asarray(labels).ravel())):
            w.writerow([i, y] + [repr(float(v)) for v in x])
