"""Dataset ingestion, active-learning split construction, and the annotation oracle."""
from __future__ import annotations

from dataclasses import dataclass
import gzip
import logging
import math
from pathlib import Path
import re
import struct
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError, ParserError

from .utils.constants import (
    BALANCED_STEP_FRACTION,
    DEFAULT_HOLDOUT_TO_INITIAL_RATIO,
    DEFAULT_MINORITY_FRACTION,
    DEFAULT_TEST_FRACTION,
    IMBALANCED_STEP_FRACTION,
)

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """Base error for malformed datasets and impossible splits."""


class IdxFormatError(DatasetError):
    """Raised when an IDX file has a bad magic number or header."""


class IdxCountMismatchError(IdxFormatError):
    """Raised when item counts disagree with the header or between images and labels."""


class CsvParseError(DatasetError):
    """Raised for non-numeric cells or ragged rows; carries the 1-based line number."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientSamplesError(DatasetError):
    """Raised when a class cannot supply the requested number of samples."""


class SelectionError(DatasetError):
    """Raised when a selection references indices outside the pool or asks for too many."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Full sample universe: N x D float64 features and N class indices.

    ``predefined_test`` holds the indices of an official test part (IDX test files)
    when the dataset was ingested with one.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    predefined_test: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise DatasetError(f"features must be a non-empty N x D matrix, got shape {features.shape}")
        if labels.shape[0] != features.shape[0]:
            raise DatasetError(f"{labels.shape[0]} labels for {features.shape[0]} samples")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise DatasetError("features contain non-finite values")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.predefined_test is not None:
            object.__setattr__(self, "predefined_test", np.asarray(self.predefined_test, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class Split:
    """Disjoint index partition of a Dataset into train / pool / holdout / test."""

    train_idx: np.ndarray
    pool_idx: np.ndarray
    holdout_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self) -> None:
        parts = {}
        for name in ("train_idx", "pool_idx", "holdout_idx", "test_idx"):
            values = np.sort(np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
            if values.size and values[0] < 0:
                raise DatasetError(f"{name} contains negative indices")
            if np.unique(values).size != values.size:
                raise DatasetError(f"{name} contains duplicate indices")
            object.__setattr__(self, name, values)
            parts[name] = values
        merged = np.concatenate(list(parts.values()))
        if np.unique(merged).size != merged.size:
            raise DatasetError("split partitions overlap")

    def sizes(self) -> Dict[str, int]:
        return {
            "train": int(self.train_idx.size),
            "pool": int(self.pool_idx.size),
            "holdout": int(self.holdout_idx.size),
            "test": int(self.test_idx.size),
        }


@dataclass(frozen=True)
class SplitSpec:
    """Balanced protocol: per-class initial and holdout sizes, test carve-out, seed.

    ``holdout_per_class`` defaults to ``initial_per_class`` (holdout the same size as
    the initial training set). ``pool_per_class`` optionally caps the pool per class.
    """

    initial_per_class: int
    holdout_per_class: Optional[int] = None
    test_fraction: float = DEFAULT_TEST_FRACTION
    use_predefined_test: bool = True
    pool_per_class: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.initial_per_class < 1:
            raise DatasetError("initial_per_class must be >= 1")
        if self.holdout_per_class is not None and self.holdout_per_class < 1:
            raise DatasetError("holdout_per_class must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DatasetError("test_fraction must lie in [0, 1)")
        if self.pool_per_class is not None and self.pool_per_class < 0:
            raise DatasetError("pool_per_class must be >= 0")


@dataclass(frozen=True)
class ImbalanceSpec:
    """Class-imbalance protocol parameters.

    By default the lower half of class indices are the minority classes; set
    ``random_minority`` for a seeded draw or ``minority_classes`` for an explicit list.
    """

    minority_fraction: float = DEFAULT_MINORITY_FRACTION
    minority_class_count: Optional[int] = None
    minority_classes: Optional[Tuple[int, ...]] = None
    random_minority: bool = False
    doubled_initial: bool = True
    holdout_to_initial_ratio: float = DEFAULT_HOLDOUT_TO_INITIAL_RATIO

    def __post_init__(self) -> None:
        if not 0.0 < self.minority_fraction <= 1.0:
            raise DatasetError("minority_fraction must lie in (0, 1]")
        if self.holdout_to_initial_ratio <= 0.0:
            raise DatasetError("holdout_to_initial_ratio must be > 0")
        if self.minority_classes is not None:
            object.__setattr__(self, "minority_classes", tuple(int(c) for c in self.minority_classes))


@dataclass(frozen=True, eq=False)
class PoolView:
    """Pool as strategies see it: dataset indices and features, never labels."""

    indices: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)

    def take(self, positions: np.ndarray) -> "PoolView":
        positions = np.asarray(positions, dtype=np.int64)
        return PoolView(self.indices[positions], self.features[positions])


@dataclass(frozen=True, eq=False)
class LabeledView:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.size)


def load_idx(images_path: PathLike, labels_path: PathLike, name: Optional[str] = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed).

    Args:
        images_path: File with magic 0x00000803 and count x rows x cols unsigned bytes.
        labels_path: File with magic 0x00000801 and count unsigned bytes.
        name: Dataset name; defaults to the images file stem.

    Returns:
        Dataset with pixels scaled to [0, 1] and images flattened row-major.

    Raises:
        IdxFormatError: On a bad magic number or a header shorter than declared.
        IdxCountMismatchError: When payload sizes or image/label counts disagree.
    """
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, header_dims=3)
    (label_count,), raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, header_dims=1)
    if pixels.size != count * rows * cols:
        raise IdxCountMismatchError(
            f"{images_path} declares {count} images of {rows}x{cols} but holds {pixels.size} pixel bytes"
        )
    if raw_labels.size != label_count:
        raise IdxCountMismatchError(f"{labels_path} declares {label_count} labels but holds {raw_labels.size}")
    if label_count != count:
        raise IdxCountMismatchError(f"{count} images but {label_count} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = raw_labels.astype(np.int64)
    dataset_name = name or Path(images_path).name.split(".")[0]
    return Dataset(features, labels, int(labels.max()) + 1, dataset_name)


def load_idx_pair(
    train_images: PathLike,
    train_labels: PathLike,
    test_images: PathLike,
    test_labels: PathLike,
    name: Optional[str] = None,
) -> Dataset:
    """Load official train and test IDX files into one Dataset with a predefined test part."""
    train = load_idx(train_images, train_labels)
    test = load_idx(test_images, test_labels)
    if train.dim != test.dim:
        raise IdxFormatError(f"train images have {train.dim} pixels, test images {test.dim}")
    features = np.concatenate([train.features, test.features])
    labels = np.concatenate([train.labels, test.labels])
    test_idx = np.arange(train.size, train.size + test.size, dtype=np.int64)
    num_classes = max(train.num_classes, test.num_classes)
    return Dataset(features, labels, num_classes, name or train.name, predefined_test=test_idx)


def load_csv(path: PathLike, has_header: bool = False, name: Optional[str] = None) -> Dataset:
    """Parse a comma-separated file whose last column is an integer class label.

    Args:
        path: UTF-8 CSV file.
        has_header: Skip the first row when True.
        name: Dataset name; defaults to the file stem.

    Returns:
        Dataset with num_classes = max label + 1.

    Raises:
        CsvParseError: On a non-numeric or non-finite cell, a non-integer or
            negative label, or a ragged row.
        DatasetError: When the file holds no data rows.
    """
    try:
        raw = pd.read_csv(
            path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            encoding="utf-8",
        )
    except EmptyDataError as exc:
        raise DatasetError(f"{path} contains no data rows") from exc
    except ParserError as exc:
        found = re.search(r"line (\d+)", str(exc))
        raise CsvParseError(f"ragged row ({exc})", int(found.group(1)) if found else 0) from exc

    # Physical line of each frame row; blank lines keep their slot.
    first_line = 2 if has_header else 1
    missing = raw.isna().to_numpy()
    cells = raw.fillna("").apply(lambda column: column.str.strip())
    blank = (cells == "").all(axis=1).to_numpy()
    rows = np.flatnonzero(~blank)
    if rows.size == 0:
        raise DatasetError(f"{path} contains no data rows")
    width = cells.shape[1]
    if width < 2:
        raise CsvParseError("need at least one feature column and a label column", first_line + int(rows[0]))

    short = missing[rows].any(axis=1)
    if short.any():
        row = int(rows[np.argmax(short)])
        found = width - int(missing[row].sum())
        raise CsvParseError(f"expected {width} fields, found {found}", first_line + row)

    data = cells.iloc[rows]
    values = data.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad_features = ~np.isfinite(values[:, :-1])
    if bad_features.any():
        pos, col = np.argwhere(bad_features)[0]
        cell = data.iat[pos, col]
        raise CsvParseError(
            f"feature cell '{cell}' in column {col + 1} is not a finite number", first_line + int(rows[pos])
        )
    label_values = values[:, -1]
    finite = np.isfinite(label_values)
    bad_labels = ~finite
    bad_labels[finite] = (np.mod(label_values[finite], 1.0) != 0.0) | (label_values[finite] < 0)
    if bad_labels.any():
        pos = int(np.argmax(bad_labels))
        cell = data.iat[pos, width - 1]
        raise CsvParseError(f"label '{cell}' is not a non-negative integer", first_line + int(rows[pos]))

    label_array = label_values.astype(np.int64)
    return Dataset(
        np.ascontiguousarray(values[:, :-1]),
        label_array,
        int(label_array.max()) + 1,
        name or Path(path).stem,
    )


def make_blobs(
    num_classes: int,
    per_class_counts: Union[int, Sequence[int]],
    dim: int,
    centers_seed: int,
    noise_sigma: float,
    sample_seed: int,
    name: str = "blobs",
) -> Dataset:
    """Isotropic Gaussian blobs around seeded standard-normal class centers.

    Samples are grouped by class in ascending class order.
    """
    if dim < 2:
        raise DatasetError("blobs need dim >= 2")
    if num_classes < 2:
        raise DatasetError("blobs need at least 2 classes")
    if np.isscalar(per_class_counts):
        counts = [int(per_class_counts)] * num_classes
    else:
        counts = [int(c) for c in per_class_counts]
    if len(counts) != num_classes or any(count < 1 for count in counts):
        raise DatasetError(f"per_class_counts must give {num_classes} positive counts, got {counts}")
    if noise_sigma < 0:
        raise DatasetError("noise_sigma must be >= 0")
    centers = np.random.default_rng(centers_seed).standard_normal((num_classes, dim))
    rng = np.random.default_rng(sample_seed)
    features = []
    labels = []
    for cls, count in enumerate(counts):
        noise = rng.standard_normal((count, dim))
        features.append(centers[cls] + noise_sigma * noise)
        labels.append(np.full(count, cls, dtype=np.int64))
    return Dataset(np.concatenate(features), np.concatenate(labels), num_classes, name)


def make_split(dataset: Dataset, spec: SplitSpec) -> Split:
    """Stratified seeded split for the balanced protocol.

    Each class contributes ``initial_per_class`` training samples and
    ``holdout_per_class`` holdout samples; whatever remains after the test
    carve-out becomes pool (optionally capped per class).

    Raises:
        InsufficientSamplesError: If a class cannot supply initial + holdout samples.
    """
    rng = np.random.default_rng(spec.seed)
    test_idx, remaining = _carve_test(dataset, spec, rng)
    holdout_per_class = spec.holdout_per_class or spec.initial_per_class
    need = spec.initial_per_class + holdout_per_class

    train: List[np.ndarray] = []
    holdout: List[np.ndarray] = []
    pool: List[np.ndarray] = []
    for cls in range(dataset.num_classes):
        available = remaining[cls]
        if available.size < need:
            raise InsufficientSamplesError(
                f"class {cls} has {available.size} samples, needs {need} "
                f"({spec.initial_per_class} initial + {holdout_per_class} holdout)"
            )
        train.append(available[: spec.initial_per_class])
        holdout.append(available[spec.initial_per_class : need])
        pool.append(_cap(available[need:], spec.pool_per_class))

    split = Split(_concat(train), _concat(pool), _concat(holdout), test_idx)
    logger.debug("balanced split for %s: %s", dataset.name, split.sizes())
    return split


def make_imbalanced_split(dataset: Dataset, spec: SplitSpec, imb: ImbalanceSpec) -> Split:
    """Seeded split where minority classes appear at ``minority_fraction`` of the majority rate.

    The initial training set uses the (optionally doubled) per-class base for majority
    classes and ``round(minority_fraction * base)`` (at least 1) for minority classes.
    The holdout set stays balanced with ``max(1, floor(ratio * |initial| / C))`` samples
    per class unless ``spec.holdout_per_class`` is given explicitly. Majority pool
    classes are equalised to the smallest majority remainder (capped by
    ``spec.pool_per_class``) and minority pool classes receive
    ``round(minority_fraction * majority count)``.

    Raises:
        InsufficientSamplesError: If any class cannot supply its share.
    """
    num_classes = dataset.num_classes
    minority = _choose_minority(num_classes, imb, spec.seed)
    majority = [cls for cls in range(num_classes) if cls not in minority]

    rng = np.random.default_rng(spec.seed)
    test_idx, remaining = _carve_test(dataset, spec, rng)

    base = spec.initial_per_class * (2 if imb.doubled_initial else 1)
    minority_initial = max(1, _round_half_up(imb.minority_fraction * base))
    initial_counts = {cls: (minority_initial if cls in minority else base) for cls in range(num_classes)}
    initial_total = sum(initial_counts.values())
    if spec.holdout_per_class is not None:
        holdout_per_class = spec.holdout_per_class
    else:
        holdout_total = math.floor(round(imb.holdout_to_initial_ratio * initial_total, 9))
        holdout_per_class = max(1, holdout_total // num_classes)

    train: List[np.ndarray] = []
    holdout: List[np.ndarray] = []
    leftovers: Dict[int, np.ndarray] = {}
    for cls in range(num_classes):
        available = remaining[cls]
        need = initial_counts[cls] + holdout_per_class
        if available.size < need:
            raise InsufficientSamplesError(
                f"class {cls} has {available.size} samples, needs {need} "
                f"({initial_counts[cls]} initial + {holdout_per_class} holdout)"
            )
        train.append(available[: initial_counts[cls]])
        holdout.append(available[initial_counts[cls] : need])
        leftovers[cls] = available[need:]

    majority_pool = min(leftovers[cls].size for cls in majority)
    if spec.pool_per_class is not None:
        majority_pool = min(majority_pool, spec.pool_per_class)
    minority_pool = _round_half_up(imb.minority_fraction * majority_pool)
    pool: List[np.ndarray] = []
    for cls in range(num_classes):
        target = minority_pool if cls in minority else majority_pool
        if leftovers[cls].size < target:
            raise InsufficientSamplesError(
                f"minority class {cls} has {leftovers[cls].size} pool samples, needs {target}"
            )
        pool.append(leftovers[cls][:target])

    split = Split(_concat(train), _concat(pool), _concat(holdout), test_idx)
    logger.debug(
        "imbalanced split for %s: %s minority=%s", dataset.name, split.sizes(), sorted(minority)
    )
    return split


def oracle_annotate(split: Split, selected_pool_indices: Sequence[int]) -> Split:
    """Move selected pool indices into the training set, revealing their labels.

    Args:
        split: Current split.
        selected_pool_indices: Dataset indices currently in the pool.

    Returns:
        New Split; the input split is not modified.

    Raises:
        SelectionError: On duplicate indices or indices that are not in the pool.
    """
    chosen = np.asarray(selected_pool_indices, dtype=np.int64).reshape(-1)
    if chosen.size == 0:
        return split
    if np.unique(chosen).size != chosen.size:
        raise SelectionError("selection contains duplicate indices")
    missing = np.setdiff1d(chosen, split.pool_idx)
    if missing.size:
        raise SelectionError(f"indices not in pool: {missing[:10].tolist()}")
    return Split(
        np.union1d(split.train_idx, chosen),
        np.setdiff1d(split.pool_idx, chosen),
        split.holdout_idx,
        split.test_idx,
    )


def pool_view(dataset: Dataset, split: Split) -> PoolView:
    return PoolView(split.pool_idx.copy(), dataset.features[split.pool_idx])


def labeled_view(dataset: Dataset, indices: np.ndarray) -> LabeledView:
    return LabeledView(dataset.features[indices], dataset.labels[indices])


def annotation_step_size(initial_train_size: int, imbalanced: bool = False) -> int:
    """Annotation step K: 10% of the initial training size, doubled to 20% when imbalanced."""
    fraction = IMBALANCED_STEP_FRACTION if imbalanced else BALANCED_STEP_FRACTION
    return max(1, _round_half_up(fraction * initial_train_size))


def _read_idx(path: PathLike, expected_magic: int, header_dims: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    header_len = 4 * (1 + header_dims)
    if len(raw) < header_len:
        raise IdxFormatError(f"{path} is shorter than its {header_len}-byte header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path} has magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{header_dims}I", raw[4:header_len])
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header_len)


def _carve_test(
    dataset: Dataset, spec: SplitSpec, rng: np.random.Generator
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Return test indices and, per class, the shuffled indices left for train/holdout/pool."""
    labels = dataset.labels
    available = np.ones(dataset.size, dtype=bool)
    test_parts: List[np.ndarray] = []
    if spec.use_predefined_test and dataset.predefined_test is not None:
        test_parts.append(dataset.predefined_test)
        available[dataset.predefined_test] = False
        carve = False
    else:
        carve = spec.test_fraction > 0.0

    remaining: Dict[int, np.ndarray] = {}
    for cls in range(dataset.num_classes):
        members = rng.permutation(np.flatnonzero(available & (labels == cls)))
        if carve:
            n_test = _round_half_up(spec.test_fraction * members.size)
            test_parts.append(members[:n_test])
            members = members[n_test:]
        remaining[cls] = members
    return _concat(test_parts), remaining


def _choose_minority(num_classes: int, imb: ImbalanceSpec, seed: int) -> frozenset:
    if imb.minority_classes is not None:
        chosen = frozenset(imb.minority_classes)
        if any(cls < 0 or cls >= num_classes for cls in chosen):
            raise DatasetError(f"minority classes {sorted(chosen)} outside [0, {num_classes})")
    else:
        count = imb.minority_class_count if imb.minority_class_count is not None else num_classes // 2
        if not 1 <= count < num_classes:
            raise DatasetError(f"minority_class_count must lie in [1, {num_classes}), got {count}")
        if imb.random_minority:
            draw = np.random.default_rng([seed, num_classes]).choice(num_classes, size=count, replace=False)
            chosen = frozenset(int(cls) for cls in draw)
        else:
            chosen = frozenset(range(count))
    if not chosen or len(chosen) >= num_classes:
        raise DatasetError("need at least one minority and one majority class")
    return chosen


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _cap(values: np.ndarray, limit: Optional[int]) -> np.ndarray:
    return values if limit is None else values[:limit]


def _concat(parts: List[np.ndarray]) -> np.ndarray:
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(parts).astype(np.int64))
