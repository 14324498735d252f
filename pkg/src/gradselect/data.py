"""Datasets: CSV and IDX readers, synthetic generators, label corruption, splits."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .valuation import fmt

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN, VAL, TEST = "train", "val", "test"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    split_tag: str = TRAIN
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        m = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (m,) or self.ids.shape != (m,):
            raise ValueError("features, labels and ids must agree on the number of rows")
        if np.unique(self.ids).size != m:
            raise ValueError("sample ids must be unique")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if m else 0
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, positions, split_tag: str | None = None) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.features[positions],
            self.labels[positions],
            self.ids[positions],
            self.split_tag if split_tag is None else split_tag,
            self.num_classes,
        )

    def select_ids(self, ids) -> "Dataset":
        pos = {int(s): i for i, s in enumerate(self.ids)}
        try:
            return self.subset([pos[int(s)] for s in ids])
        except KeyError as exc:
            raise ValueError(f"sample id {exc.args[0]} not in dataset") from None


def load_csv(path, label_column: str = "label") -> Dataset:
    """Numeric CSV with a header row; every column but ``label_column`` is a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats = [float(v) for i, v in enumerate(row) if i != li]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            raw = row[li].strip()
            try:
                lab = int(raw)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {raw!r} is not an integer") from None
            rows.append(feats)
            labels.append(lab)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), np.arange(len(rows)))


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.n_features)] + [label_column])
        for row, lab in zip(dataset.features, dataset.labels):
            w.writerow([fmt(v) for v in row] + [int(lab)])


def _read_maybe_gz(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """IDX image/label pair (optionally gzipped). Pixels scaled to [0, 1]."""
    img = _read_maybe_gz(images_path)
    lab = _read_maybe_gz(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise ValueError("IDX file too short")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad image magic 0x{magic:08x}")
    magic, n_lab = struct.unpack(">II", lab[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x}")
    if n_img != n_lab:
        raise ValueError(f"{n_img} images but {n_lab} labels")
    d = rows * cols
    if len(img) != 16 + n_img * d or len(lab) != 8 + n_lab:
        raise ValueError("IDX payload size does not match its header")
    n = n_img if limit is None else min(limit, n_img)
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * d, offset=16).reshape(n, d)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(pixels / 255.0, labels, np.arange(n), num_classes=max(int(labels.max()) + 1, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False) -> None:
    """Write uint8 images of shape (n, rows, cols) and their labels as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as fh:
        fh.write(img)
    with opener(labels_path, "wb") as fh:
        fh.write(lab)


def gen_blobs(
    m: int, d: int = 10, n_classes: int = 5, cluster_spread: float = 1.0, seed: int = 0,
    center_box: tuple[float, float] = (-2.5, 2.5),
) -> Dataset:
    """Class-balanced isotropic Gaussian blobs, one blob per class."""
    if m < n_classes or n_classes < 2 or d < 1 or cluster_spread < 0:
        raise ValueError("need m >= n_classes >= 2, d >= 1 and a non-negative spread")
    X, y = make_blobs(
        n_samples=m, n_features=d, centers=n_classes, cluster_std=cluster_spread,
        center_box=center_box, random_state=seed,
    )
    return Dataset(X, y, np.arange(m), num_classes=n_classes)


def gen_moons(m: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    if m < 2 or noise < 0:
        raise ValueError("need m >= 2 and non-negative noise")
    X, y = make_moons(n_samples=m, noise=noise or None, random_state=seed)
    return Dataset(X, y, np.arange(m), num_classes=2)


def corrupt_labels(dataset: Dataset, count: int | None = None, fraction: float | None = None, seed: int = 0):
    """Give ``count`` (or ``fraction * m``) random samples a uniformly drawn wrong label.

    Returns the corrupted dataset and the sorted ids of the corrupted samples.
    """
    m = len(dataset)
    if (count is None) == (fraction is None):
        raise ValueError("give exactly one of count or fraction")
    if count is None:
        count = int(round(fraction * m))
    if not 0 <= count <= m:
        raise ValueError(f"cannot corrupt {count} of {m} samples")
    C = dataset.num_classes
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(m, size=count, replace=False))
    labels = dataset.labels.copy()
    labels[pos] = (labels[pos] + rng.integers(1, C, size=count)) % C
    out = Dataset(dataset.features, labels, dataset.ids, dataset.split_tag, C)
    return out, dataset.ids[pos]


def split_dataset(dataset: Dataset, ratios=(0.7, 0.2, 0.1), seed: int = 0):
    """Seeded train/val/test split; sizes are rounded, the remainder goes to test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must be three non-negative numbers summing to 1")
    m = len(dataset)
    perm = np.random.default_rng(seed).permutation(m)
    n_train = int(round(ratios[0] * m))
    n_val = int(round(ratios[1] * m))
    return (
        dataset.subset(np.sort(perm[:n_train]), TRAIN),
        dataset.subset(np.sort(perm[n_train:n_train + n_val]), VAL),
        dataset.subset(np.sort(perm[n_train + n_val:]), TEST),
    )
