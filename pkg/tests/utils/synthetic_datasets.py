"""Deterministic synthetic datasets, models and file fixtures for tests and offline runs."""
from __future__ import annotations

import gzip
from pathlib import Path
import struct
from typing import Sequence, Tuple

import numpy as np

from activelearn.data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, Dataset, Split, make_blobs
from activelearn.nn_core import MlpModel, ModelSnapshot


def blobs_dataset(
    num_classes: int = 3,
    per_class: int = 40,
    dim: int = 4,
    noise_sigma: float = 0.5,
    seed: int = 0,
) -> Dataset:
    """Small well-separated Gaussian blobs; centers are scaled up so classes rarely overlap."""
    base = make_blobs(num_classes, per_class, dim, centers_seed=seed, noise_sigma=noise_sigma, sample_seed=seed + 1)
    centers = np.random.default_rng(seed).standard_normal((num_classes, dim))
    # Triple the center spread while keeping the noise scale.
    shifted = base.features + 2.0 * centers[base.labels]
    return Dataset(shifted, base.labels, num_classes, "blobs")


def random_snapshot(
    layer_dims: Sequence[int], seed: int = 0, dropout_rate: float = 0.0, scale: float = 1.0
) -> ModelSnapshot:
    model = MlpModel.initialize(layer_dims, seed=seed, dropout_rate=dropout_rate)
    if scale != 1.0:
        model.set_parameters({key: value * scale for key, value in model.parameters().items()})
    return model.snapshot()


def random_inputs(count: int, dim: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, dim))


def random_images(count: int, rows: int = 4, cols: int = 4, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(count, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count, dtype=np.uint8)
    return images, labels


def idx_image_bytes(images: np.ndarray, count: int | None = None) -> bytes:
    """Serialize uint8 images as an IDX3 file; ``count`` overrides the header item count."""
    n, rows, cols = images.shape
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n if count is None else count, rows, cols)
    return header + images.astype(np.uint8).tobytes()


def idx_label_bytes(labels: np.ndarray, count: int | None = None) -> bytes:
    header = struct.pack(">II", IDX_LABELS_MAGIC, len(labels) if count is None else count)
    return header + np.asarray(labels, dtype=np.uint8).tobytes()


def write_idx_pair(
    directory: Path,
    images: np.ndarray,
    labels: np.ndarray,
    prefix: str = "train",
    compress: bool = False,
) -> Tuple[Path, Path]:
    """Write an IDX image/label file pair and return their paths."""
    suffix = ".gz" if compress else ""
    image_path = Path(directory) / f"{prefix}-images-idx3-ubyte{suffix}"
    label_path = Path(directory) / f"{prefix}-labels-idx1-ubyte{suffix}"
    writer = gzip.open if compress else open
    with writer(image_path, "wb") as fh:
        fh.write(idx_image_bytes(images))
    with writer(label_path, "wb") as fh:
        fh.write(idx_label_bytes(labels))
    return image_path, label_path


def write_csv(path: Path, features: np.ndarray, labels: Sequence[int], header: bool = False) -> Path:
    lines = []
    if header:
        lines.append(",".join([f"f{i}" for i in range(features.shape[1])] + ["label"]))
    for row, label in zip(features, labels):
        lines.append(",".join(repr(float(value)) for value in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def same_split(first: Split, second: Split) -> bool:
    return all(
        np.array_equal(getattr(first, name), getattr(second, name))
        for name in ("train_idx", "pool_idx", "holdout_idx", "test_idx")
    )
