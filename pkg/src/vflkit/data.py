"""Dataset ingestion, vertical feature partitioning, and tiny-sample drawing."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .model import as_matrix, as_vector

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

STD_FLOOR = 1e-12


@dataclass
class Dataset:
    features: np.ndarray              # (n, d) float64
    labels: np.ndarray                # (n,) int class indices in [0, C)
    feature_names: list[str]
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None  # (mean, std)

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels length must match row count")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("class indices must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class PartitionSpec:
    """Per-participant ordered column-index lists; disjoint and covering."""

    columns: list[list[int]]

    def __post_init__(self):
        if not self.columns or any(not c for c in self.columns):
            raise ValueError("every participant needs at least one column")
        flat = [c for cols in self.columns for c in cols]
        if len(set(flat)) != len(flat):
            raise ValueError("participant column lists overlap")
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("column lists must cover exactly [0, d)")

    @property
    def d(self) -> int:
        return sum(len(c) for c in self.columns)

    @property
    def n_participants(self) -> int:
        return len(self.columns)


@dataclass
class TinyDataset:
    """A small sample of one participant's test rows, as seen by the adversary."""

    rows: np.ndarray
    source_indices: list[int]

    def __post_init__(self):
        self.rows = as_matrix(self.rows)
        if self.rows.shape[0] < 1:
            raise ValueError("tiny dataset must hold at least one row")
        if len(self.source_indices) != self.rows.shape[0]:
            raise ValueError("source indices must match row count")


def load_csv(path, label_column: str) -> Dataset:
    """Read a numeric CSV with a header row; one column holds class labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        rows = []
        raw_labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: ragged row")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell") from None
            raw_labels.append(values.pop(label_idx))
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    feature_names = [h for i, h in enumerate(header) if i != label_idx]
    raw = np.asarray(raw_labels)
    if not np.allclose(raw, np.round(raw)):
        raise ValueError(f"{path}: label column must hold integers")
    # Remap labels onto dense [0, C) in sorted order of observed values.
    uniq, labels = np.unique(raw.astype(np.int64), return_inverse=True)
    return Dataset(np.asarray(rows), labels, feature_names)


def _read_idx_header(fh, path, expected_magic: int, n_dims: int):
    head = fh.read(4 * (1 + n_dims))
    if len(head) != 4 * (1 + n_dims):
        raise ValueError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}I", head)
    if fields[0] != expected_magic:
        raise ValueError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
    return fields[1:]


def load_idx(images_path, labels_path) -> Dataset:
    """Read big-endian IDX image/label files; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        n, rows, cols = _read_idx_header(fh, images_path, IDX_IMAGES_MAGIC, 3)
        raw = fh.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise ValueError(f"{images_path}: truncated pixel data")
    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_idx_header(fh, labels_path, IDX_LABELS_MAGIC, 1)
        raw_labels = fh.read(n_labels)
        if len(raw_labels) != n_labels:
            raise ValueError(f"{labels_path}: truncated label data")
    if n_labels != n:
        raise ValueError(f"image count {n} != label count {n_labels}")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    features = pixels.reshape(n, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    names = [f"px{r:02d}_{c:02d}" for r in range(rows) for c in range(cols)]
    return Dataset(features, labels, names)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray,
              rows: int = 28, cols: int = 28):
    """Write [0,1]-scaled image rows and labels in the IDX byte layout."""
    images = as_matrix(images, cols=rows * cols)
    labels = np.asarray(labels, dtype=np.uint8).ravel()
    if labels.shape[0] != images.shape[0]:
        raise ValueError("image/label count mismatch")
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, images.shape[0], rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def partition_vertical(ds_or_features, spec: PartitionSpec) -> list[np.ndarray]:
    """Split feature columns into per-participant views (order preserved)."""
    features = ds_or_features.features if isinstance(ds_or_features, Dataset) \
        else as_matrix(ds_or_features)
    if spec.d != features.shape[1]:
        raise ValueError(
            f"partition covers {spec.d} columns, dataset has {features.shape[1]}")
    return [features[:, cols] for cols in spec.columns]


def concat_views(views: list[np.ndarray], spec: PartitionSpec) -> np.ndarray:
    """Inverse of partition_vertical: reassemble original column order."""
    n = views[0].shape[0]
    out = np.empty((n, spec.d))
    for view, cols in zip(views, spec.columns):
        out[:, cols] = view
    return out


# Pixel-column allocations that balance ink across participants for
# 28x28 digit images (counts of image columns, left to right).
_IMAGE_COLUMN_SPLITS = {2: (14, 14), 3: (11, 6, 11), 5: (8, 4, 4, 4, 8)}


def image_column_partition(col_counts, side: int = 28) -> PartitionSpec:
    """Partition row-major side*side pixel features by image-column blocks."""
    if sum(col_counts) != side:
        raise ValueError(f"column counts must sum to {side}")
    specs = []
    start = 0
    for count in col_counts:
        cols = [r * side + c for r in range(side) for c in range(start, start + count)]
        specs.append(cols)
        start += count
    return PartitionSpec(specs)


def mnist_column_split(participants: int, side: int = 28) -> PartitionSpec:
    """Balanced vertical split of digit images for 2, 3, or 5 participants."""
    if participants not in _IMAGE_COLUMN_SPLITS:
        raise ValueError(f"unsupported participant count {participants}")
    return image_column_partition(_IMAGE_COLUMN_SPLITS[participants], side)


def ratio_split(d: int, ratio: float) -> PartitionSpec:
    """Two-party split where the first party holds ratio/(1+ratio) of d columns."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    n_a = int(round(d * ratio / (1.0 + ratio)))
    if n_a < 1 or n_a >= d:
        raise ValueError(f"ratio {ratio} leaves an empty partition for d={d}")
    return PartitionSpec([list(range(n_a)), list(range(n_a, d))])


def sample_tiny(view: np.ndarray, h: int, seed: int) -> TinyDataset:
    """Draw h distinct rows from a test view, reproducibly under the seed."""
    view = as_matrix(view)
    if h < 1:
        raise ValueError("h must be at least 1")
    if h > view.shape[0]:
        raise ValueError(f"h={h} exceeds available rows {view.shape[0]}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(view.shape[0], size=h, replace=False)
    return TinyDataset(view[idx], [int(i) for i in idx])


def synth_gmm_dataset(weights, means, covs, n: int, seed: int) -> Dataset:
    """Sample a labeled dataset from mixture components (labels = component)."""
    weights = as_vector(weights)
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("component weights must be positive and sum to 1")
    means = as_matrix(means)
    covs = np.asarray(covs, dtype=np.float64)
    k, d = means.shape
    if covs.shape != (k, d, d):
        raise ValueError(f"covariances must be {(k, d, d)}, got {covs.shape}")
    chols = []
    for cov in covs:
        try:
            chols.append(np.linalg.cholesky(cov + 1e-12 * np.eye(d)))
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive semi-definite") from None
    rng = np.random.default_rng(seed)
    comps = rng.choice(k, size=n, p=weights)
    noise = rng.standard_normal((n, d))
    features = np.empty((n, d))
    for j in range(k):
        mask = comps == j
        features[mask] = means[j] + noise[mask] @ chols[j].T
    return Dataset(features, comps, [f"x{i:02d}" for i in range(d)])


def normalize(ds: Dataset) -> Dataset:
    """Z-score features; constant columns map to zero with a floored std."""
    if ds.n < 2:
        raise ValueError("need at least two rows to normalize")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std = np.where(std < STD_FLOOR, STD_FLOOR, std)
    features = (ds.features - mean) / std
    return replace(ds, features=features, norm_stats=(mean, std))


def inverse_normalize(ds: Dataset) -> Dataset:
    if ds.norm_stats is None:
        raise ValueError("dataset carries no normalization stats")
    mean, std = ds.norm_stats
    return replace(ds, features=ds.features * std + mean, norm_stats=None)


def train_test_split(ds: Dataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified-by-label split with a fixed seed."""
    rng = np.random.default_rng(seed)
    test_idx: list[int] = []
    for label in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == label)
        idx = rng.permutation(idx)
        n_test = max(1, int(round(len(idx) * test_fraction)))
        test_idx.extend(idx[:n_test])
    mask = np.zeros(ds.n, dtype=bool)
    mask[test_idx] = True
    train = Dataset(ds.features[~mask], ds.labels[~mask], ds.feature_names,
                    ds.norm_stats)
    test = Dataset(ds.features[mask], ds.labels[mask], ds.feature_names,
                   ds.norm_stats)
    return train, test
