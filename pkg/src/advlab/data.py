"""Dataset ingestion (IDX binary format) and synthetic data generation.

Inputs always live in the [0,1] box; the attack projections depend on it.
Everything is deterministic: the same files or the same (parameters, seed)
reproduce bit-identical datasets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class BadMagic(ValueError):
    """IDX file does not start with the expected magic number."""


class Truncated(ValueError):
    """IDX file ends before the declared payload."""


class CountMismatch(ValueError):
    """Image and label files declare different item counts."""


@dataclass
class Dataset:
    inputs: np.ndarray  # (m, d), values in [0, 1]
    labels: np.ndarray  # (m,), ints in [0, num_classes)
    num_classes: int
    name: str

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise Truncated(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def _read_be32(f, what: str) -> int:
    return struct.unpack(">i", _read_exact(f, 4, what))[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0,1] by /255."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "image rows")
        cols = _read_be32(f, "image cols")
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, "image payload"), dtype=np.uint8
        )
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        label_count = _read_be32(f, "label count")
        labels = np.frombuffer(_read_exact(f, label_count, "label payload"), dtype=np.uint8)
    if label_count != count:
        raise CountMismatch(f"{count} images but {label_count} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if count else 1
    return Dataset(inputs, labels.astype(np.int64), num_classes, name=str(images_path))


def write_idx_images(path, images: np.ndarray):
    """Write a (count, rows, cols) uint8 array in IDX image format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must have shape (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def synth_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Balanced Gaussian clusters at seeded random centers, clipped to [0,1]."""
    if min(num_classes, per_class, dim) < 1 or spread < 0:
        raise ValueError("num_classes, per_class, dim must be positive and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, dim))
    inputs = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        inputs[block] = centers[c] + spread * rng.standard_normal((per_class, dim))
        labels[block] = c
    np.clip(inputs, 0.0, 1.0, out=inputs)
    name = f"blobs-c{num_classes}-n{per_class}-d{dim}-s{spread:g}-seed{seed}"
    return Dataset(inputs, labels, num_classes, name=name)


def split_blobs(
    num_classes: int, train_per_class: int, test_per_class: int,
    dim: int, spread: float, seed: int,
) -> tuple[Dataset, Dataset]:
    """Train/test blob datasets sharing the same class centers.

    One generator draw produces train_per_class + test_per_class samples
    per class; the first block of each class becomes the train split.
    """
    full = synth_blobs(num_classes, train_per_class + test_per_class, dim, spread, seed)
    per = train_per_class + test_per_class
    train_idx, test_idx = [], []
    for c in range(num_classes):
        start = c * per
        train_idx.extend(range(start, start + train_per_class))
        test_idx.extend(range(start + train_per_class, start + per))
    train = Dataset(full.inputs[train_idx], full.labels[train_idx], num_classes,
                    name=f"{full.name}-train")
    test = Dataset(full.inputs[test_idx], full.labels[test_idx], num_classes,
                   name=f"{full.name}-test")
    return train, test


def batches(ds: Dataset, batch_size: int, epoch_seed: int):
    """Yield (inputs, labels) minibatches in a seeded shuffle order.

    The final partial batch is kept; the concatenation of all batches is a
    permutation of the dataset.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
