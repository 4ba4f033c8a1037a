"""Dataset loading, synthetic data, preprocessing and fixed train/cal/test splits."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FEATURES_MAGIC = b"CTFD"
FEATURES_VERSION = 1
PREPROCESSING_KINDS = ("none", "per_feature_whiten", "pixel_scale_pm1")


@dataclass(frozen=True)
class Dataset:
    """Features and labels stored in train, cal, test order."""

    features: np.ndarray
    labels: np.ndarray
    n_train: int
    n_cal: int
    n_test: int
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractError("features must be [n, d] with one label per row")
        if self.n_train + self.n_cal + self.n_test != n:
            raise ContractError(
                f"split sizes {self.n_train}+{self.n_cal}+{self.n_test} do not sum to {n}"
            )
        if min(self.n_train, self.n_cal, self.n_test) < 0:
            raise ContractError("split sizes must be non-negative")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _part(self, start: int, stop: int):
        return self.features[start:stop], self.labels[start:stop]

    def train(self):
        return self._part(0, self.n_train)

    def cal(self):
        return self._part(self.n_train, self.n_train + self.n_cal)

    def test(self):
        return self._part(self.n_train + self.n_cal, self.n)

    def pool(self):
        """Calibration and test examples together."""
        return self._part(self.n_train, self.n)


def with_splits(dataset: Dataset, n_train: int, n_cal: int, n_test: int) -> Dataset:
    """Re-cut the stored order into new split sizes (no shuffling)."""
    if n_train + n_cal + n_test > dataset.n:
        raise ContractError(f"splits need {n_train + n_cal + n_test} examples, dataset has {dataset.n}")
    keep = n_train + n_cal + n_test
    return replace(
        dataset,
        features=dataset.features[:keep],
        labels=dataset.labels[:keep],
        n_train=n_train,
        n_cal=n_cal,
        n_test=n_test,
    )


def concatenate(train: Dataset, cal_test: Dataset, n_cal: int) -> Dataset:
    """Training rows from ``train``; calibration/test from the first ``n_cal`` / remaining rows of ``cal_test``."""
    k = max(train.num_classes, cal_test.num_classes)
    return Dataset(
        np.concatenate([train.features, cal_test.features]),
        np.concatenate([train.labels, cal_test.labels]),
        train.n,
        n_cal,
        cal_test.n - n_cal,
        k,
        f"{train.provenance}+{cal_test.provenance}",
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, label_column: str | int = "label", num_classes: int | None = None) -> Dataset:
    """Numeric CSV with a header row; every non-label column is a feature."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header row required") from None
        if isinstance(label_column, int):
            label_idx = label_column
        elif label_column in header:
            label_idx = header.index(label_column)
        else:
            raise FormatError(f"{path}: no column named {label_column!r}")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                label = float(row[label_idx])
                values = [float(v) for i, v in enumerate(row) if i != label_idx]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if label != int(label):
                raise FormatError(f"{path}:{lineno}: label {row[label_idx]!r} is not an integer")
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise FormatError(f"{path}: labels outside [0, {k})")
    features = np.asarray(rows, dtype=np.float64)
    return Dataset(features, labels, len(labels), 0, 0, k, f"csv:{path.name}")


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.dim)] + [label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# IDX (MNIST family)
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: IDX magic {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: IDX body has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n = images.shape[0]
    features = images.reshape(n, -1).astype(np.float64)
    return Dataset(features, labels.astype(np.int64), n, 0, 0, num_classes, f"idx:{Path(images_path).name}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(directory, n_cal: int = 5000) -> Dataset:
    """MNIST-style directory: the last ``n_cal`` training images become the calibration split."""
    directory = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FormatError(f"{directory}: missing {stem}")

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    k = max(train.num_classes, int(train.labels.max()) + 1)
    return Dataset(
        np.concatenate([train.features, test.features]),
        np.concatenate([train.labels, test.labels]),
        train.n - n_cal,
        n_cal,
        test.n,
        k,
        f"idx:{directory.name}",
    )


def remap_labels(dataset: Dataset, mapping: dict[int, int]) -> Dataset:
    """Keep only examples whose label is in ``mapping`` and relabel them.

    Split membership is preserved, e.g. for the 52-letter EMNIST subset.
    """
    keep = np.isin(dataset.labels, list(mapping))
    bounds = np.cumsum([0, dataset.n_train, dataset.n_cal, dataset.n_test])
    sizes = [int(keep[a:b].sum()) for a, b in zip(bounds[:-1], bounds[1:])]
    lookup = np.vectorize(mapping.__getitem__, otypes=[np.int64])
    labels = dataset.labels[keep]
    return Dataset(
        dataset.features[keep],
        lookup(labels) if labels.size else labels,
        *sizes,
        num_classes=max(mapping.values()) + 1,
        provenance=dataset.provenance + ":remapped",
    )


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------


def write_features(dataset: Dataset, path) -> None:
    """Binary dump: magic, then version, n, d as little-endian uint64, float32 rows, int64 labels."""
    header = FEATURES_MAGIC + struct.pack("<QQQ", FEATURES_VERSION, dataset.n, dataset.dim)
    body = dataset.features.astype("<f4").tobytes() + dataset.labels.astype("<i8").tobytes()
    Path(path).write_bytes(header + body)


def load_features(path, num_classes: int | None = None) -> Dataset:
    """Load a binary feature dump, or a CSV with a ``label`` column."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_csv(path, "label", num_classes)
    raw = path.read_bytes()
    if len(raw) < 28 or raw[:4] != FEATURES_MAGIC:
        raise FormatError(f"{path}: not a feature dump")
    version, n, d = struct.unpack("<QQQ", raw[4:28])
    if version != FEATURES_VERSION:
        raise FormatError(f"{path}: unsupported feature dump version {version}")
    if n == 0 or d == 0:
        raise FormatError(f"{path}: empty feature dump")
    expected = 28 + 4 * n * d + 8 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: header promises {n}x{d} ({expected} bytes), file has {len(raw)}")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=28).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=28 + 4 * n * d).astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(features, labels, int(n), 0, 0, k, f"features:{path.name}")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def class_means(num_classes: int, dim: int, separation: float, seed: int = 0) -> np.ndarray:
    """Class centers with pairwise distance ``separation`` when ``K <= d``.

    Centers are scaled orthonormal directions (a regular simplex); with more
    classes than dimensions they are random points on a sphere of radius
    ``separation / sqrt(2)``.
    """
    rng = np.random.default_rng(seed)
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = q[:, :num_classes].T
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * separation / np.sqrt(2.0)


def synthetic_gaussian_mixture(
    num_classes: int,
    dim: int,
    n_train: int,
    n_cal: int,
    n_test: int,
    separation: float = 3.0,
    seed: int = 0,
    means: np.ndarray | None = None,
    class_probs=None,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters, uniformly distributed labels by default."""
    if num_classes < 2 or dim < 2:
        raise ContractError("need at least 2 classes and 2 dimensions")
    if means is None:
        means = class_means(num_classes, dim, separation, seed)
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (num_classes, dim):
        raise ContractError(f"means must be [{num_classes}, {dim}], got {means.shape}")
    rng = np.random.default_rng([seed, 1])
    n = n_train + n_cal + n_test
    labels = rng.choice(num_classes, size=n, p=class_probs)
    features = means[labels] + rng.standard_normal((n, dim))
    return Dataset(
        features, labels.astype(np.int64), n_train, n_cal, n_test, num_classes,
        f"synthetic:K={num_classes},d={dim},sep={separation},seed={seed}",
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Preprocessing:
    kind: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def apply(self, features: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return features
        if self.kind == "pixel_scale_pm1":
            return features / 127.5 - 1.0
        return (features - self.mean) / self.std


def fit_preprocessing(dataset: Dataset, kind: str) -> Preprocessing:
    if kind not in PREPROCESSING_KINDS:
        raise ContractError(f"unknown preprocessing {kind!r}")
    if kind != "per_feature_whiten":
        return Preprocessing(kind)
    x, _ = dataset.train()
    if len(x) == 0:
        raise ContractError("whitening needs a non-empty training split")
    return Preprocessing(kind, x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))


def fit_apply_preprocessing(dataset: Dataset, kind: str) -> tuple[Dataset, Preprocessing]:
    prep = fit_preprocessing(dataset, kind)
    return replace(dataset, features=prep.apply(dataset.features)), prep
