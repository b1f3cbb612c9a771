"""Datasets: synthetic blobs, IDX / CIFAR-10 binary / CSV loaders, subsetting, batching."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecificationError
from .nncore import SampleBatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


def fingerprint(features: np.ndarray, labels: np.ndarray, classes: int) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(features.shape, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    h.update(int(classes).to_bytes(8, "little"))
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled samples; sample ``i`` is row ``i``."""

    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise SpecificationError("features must be (n, dim) with one label per row")
        if len(labels) < 1:
            raise SpecificationError("dataset must contain at least one sample")
        if labels.min() < 0 or labels.max() >= self.classes:
            raise SpecificationError(f"labels must lie in [0, {self.classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "fingerprint", fingerprint(features, labels, self.classes))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def batch(self, indices) -> SampleBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return SampleBatch(idx, self.features[idx], self.labels[idx])

    def full_batch(self) -> SampleBatch:
        return SampleBatch(np.arange(len(self)), self.features, self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def synth_blobs(n: int, classes: int, dim: int, spread: float = 1.0, seed: int = 0,
                separation: float = 1.0) -> Dataset:
    """Gaussian blobs around random class centres, classes balanced within one sample."""
    if n < classes:
        raise SpecificationError(f"need n >= classes, got n={n}, classes={classes}")
    if spread <= 0:
        raise SpecificationError("spread must be positive")
    rng = np.random.default_rng(seed)
    centres = separation * rng.standard_normal((classes, dim))
    labels = rng.permutation(np.arange(n) % classes)
    features = centres[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(features, labels, classes)


def standardize(dataset: Dataset, reference: Dataset | None = None) -> Dataset:
    """Zero-mean, unit-variance features using ``reference`` statistics."""
    ref = dataset if reference is None else reference
    mean = ref.features.mean(axis=0)
    std = ref.features.std(axis=0)
    std[std == 0] = 1.0
    return Dataset((dataset.features - mean) / std, dataset.labels, dataset.classes)


def _read_idx(path: Path, expected_magic: int):
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX header", offset=len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic, expected 0x{expected_magic:08x}, found 0x{magic:08x}",
            offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    size = math.prod(dims)
    if len(raw) < header + size:
        raise FormatError(
            f"{path}: truncated IDX payload, need {size} bytes after header, have {len(raw) - header}",
            offset=len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def _labels_path_for(images: Path) -> Path:
    name = images.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return images.with_name(name.replace(a, b, 1))
    raise SpecificationError(f"cannot infer label file for {images}; pass labels_path")


def load_idx(images_path, labels_path=None, classes: int = 10) -> Dataset:
    images_path = Path(images_path)
    labels_path = Path(labels_path) if labels_path else _labels_path_for(images_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise FormatError(f"{labels_path}: label {labels[bad[0]]} out of range",
                          offset=8 + int(bad[0]))
    feats = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(feats, labels, classes)


def load_cifar10_bin(path, classes: int = 10) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record",
            offset=len(raw) - len(raw) % CIFAR_RECORD)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range",
                          offset=int(bad[0]) * CIFAR_RECORD)
    feats = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(feats, labels, classes)


def load_csv(path, classes: int | None = None) -> Dataset:
    path = Path(path)
    with path.open() as f:
        header = f.readline().strip().split(",")
    if not header or header[0] != "label":
        raise FormatError(f"{path}: first header column must be 'label'", offset=0)
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = table[:, 0]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1
    if labels.max() >= classes:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    return Dataset(table[:, 1:], labels, classes)


def load_dataset(fmt: str, path, **kwargs) -> Dataset:
    """Load ``path`` in one of the formats ``idx``, ``cifar10bin`` or ``csv``."""
    loaders = {"idx": load_idx, "cifar10bin": load_cifar10_bin, "csv": load_csv}
    if fmt not in loaders:
        raise SpecificationError(f"unknown dataset format {fmt!r}")
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return loaders[fmt](path, **kwargs)


def _apportion(counts: np.ndarray, fraction: float, total: int) -> np.ndarray:
    quota = counts * fraction
    take = np.floor(quota).astype(np.int64)
    remainder = quota - take
    # largest remainder first, lower class id on ties
    order = sorted(range(len(counts)), key=lambda c: (-remainder[c], c))
    for c in order[: total - int(take.sum())]:
        take[c] += 1
    return np.minimum(take, counts)


def subset_indices(dataset: Dataset, fraction: float, seed: int = 0) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise SpecificationError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dataset)
    total = int(round(fraction * n))
    if total < dataset.classes:
        raise SpecificationError("subset would be smaller than the class count")
    if fraction == 1:
        return np.arange(n)
    counts = dataset.class_counts()
    take = _apportion(counts, fraction, total)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        chosen.append(rng.permutation(members)[: take[c]])
    return np.sort(np.concatenate(chosen))


def subset(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Stratified random subset of ``round(fraction * n)`` samples, original order kept."""
    idx = subset_indices(dataset, fraction, seed)
    if len(idx) == len(dataset):
        return dataset
    return Dataset(dataset.features[idx], dataset.labels[idx], dataset.classes)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size <= 0:
            raise SpecificationError("batch size must be positive")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    # Generator.permutation is a Fisher-Yates shuffle
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: Dataset | int, plan: BatchPlan) -> list:
    """Index lists partitioning one shuffled epoch; the last batch may be short."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if plan.batch_size > n:
        raise SpecificationError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    perm = epoch_permutation(n, plan.seed, plan.epoch)
    return [perm[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batch_for_step(n: int, plan: BatchPlan, step: int) -> np.ndarray:
    """Defining batch of training step ``step`` when epochs are consumed back to back."""
    per_epoch = batches_per_epoch(n, plan.batch_size)
    epoch, j = divmod(step, per_epoch)
    perm = epoch_permutation(n, plan.seed, plan.epoch + epoch)
    return perm[j * plan.batch_size:(j + 1) * plan.batch_size]
