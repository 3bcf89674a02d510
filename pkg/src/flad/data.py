"""Datasets, client partitioning and poisoning attacks."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import as_seed_sequence

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, path, field_name, message):
        self.path = str(path)
        self.field = field_name
        super().__init__(f"{path}: {field_name}: {message}")


class PartitionError(ValueError):
    pass


class PoisonSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be 2-D (n, d_in)")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"{features.shape[0]} samples but {labels.shape} labels")
        if features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise ValueError("feature values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)


# -- IDX ---------------------------------------------------------------------

def _read_header(buf: bytes, path, magic: int, n_dims: int, kind: str):
    if len(buf) < 4 + 4 * n_dims:
        raise IdxFormatError(path, "header", f"truncated {kind} header ({len(buf)} bytes)")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxFormatError(path, "magic", f"expected 0x{magic:08x}, found 0x{found:08x}")
    return struct.unpack(f">{n_dims}I", buf[4:4 + 4 * n_dims])


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an MNIST-style IDX image/label pair, scaling pixels to [0, 1]."""
    img_buf = Path(images_path).read_bytes()
    count, rows, cols = _read_header(img_buf, images_path, IDX_IMAGES_MAGIC, 3, "image")
    expected = 16 + count * rows * cols
    if len(img_buf) < expected:
        raise IdxFormatError(images_path, "pixels",
                             f"truncated: need {expected} bytes, have {len(img_buf)}")
    lab_buf = Path(labels_path).read_bytes()
    (n_labels,) = _read_header(lab_buf, labels_path, IDX_LABELS_MAGIC, 1, "label")
    if n_labels != count:
        raise IdxFormatError(labels_path, "count",
                             f"{n_labels} labels but {count} images in {images_path}")
    if len(lab_buf) < 8 + n_labels:
        raise IdxFormatError(labels_path, "labels",
                             f"truncated: need {8 + n_labels} bytes, have {len(lab_buf)}")

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_labels, offset=8)
    if labels.size and labels.max() >= n_classes:
        raise IdxFormatError(labels_path, "labels", f"label {labels.max()} >= {n_classes} classes")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), n_classes)


def write_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a dataset back to IDX; features are quantised to bytes."""
    n = len(dataset)
    if rows * cols != dataset.d_in:
        raise ValueError(f"rows*cols={rows * cols} does not match d_in={dataset.d_in}")
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# -- synthetic data ----------------------------------------------------------

def gen_synthetic(k: int, per_class: int, d_in: int, class_sep: float, std: float,
                  seed=None) -> Dataset:
    """Gaussian blobs, class ``j`` centred at ``class_sep * e_j``, clamped to [0, 1].

    Rows are grouped by class in ascending label order.
    """
    if k < 2 or per_class < 1:
        raise ValueError("need k >= 2 and per_class >= 1")
    if k > d_in:
        raise ValueError(f"k={k} classes need at least k coordinate axes, d_in={d_in}")
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = np.random.default_rng(seed)
    means = np.zeros((k, d_in))
    means[np.arange(k), np.arange(k)] = class_sep
    labels = np.repeat(np.arange(k), per_class)
    noise = rng.normal(0.0, 1.0, size=(k * per_class, d_in)) * std
    features = np.clip(means[labels] + noise, 0.0, 1.0)
    return Dataset(features, labels, k)


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.d_in)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [format(v, ".17g") for v in row])


def read_csv(path, n_classes: int | None = None) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = data[:, 0].astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(data[:, 1:], labels, k)


# -- sampling ----------------------------------------------------------------

def _stratified_indices(labels: np.ndarray, n_classes: int, m: int, rng) -> np.ndarray:
    n = labels.shape[0]
    present = [c for c in range(n_classes) if np.any(labels == c)]
    if m < len(present):
        return np.sort(rng.choice(n, size=m, replace=False))
    counts = np.array([np.sum(labels == c) for c in present])
    # one per class first, remainder by largest-remainder proportional allocation
    quota = np.ones(len(present), dtype=np.int64)
    extra = m - len(present)
    share = (counts - 1) / max(1, (counts - 1).sum()) * extra
    quota += np.floor(share).astype(np.int64)
    leftover = m - quota.sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    for i in order:
        if leftover == 0:
            break
        if quota[i] < counts[i]:
            quota[i] += 1
            leftover -= 1
    chosen = []
    for c, q in zip(present, quota):
        pool = np.flatnonzero(labels == c)
        chosen.append(rng.choice(pool, size=int(q), replace=False))
    return np.sort(np.concatenate(chosen))


def reference_indices(dataset: Dataset, m: int, seed=None) -> np.ndarray:
    n = len(dataset)
    if m > n:
        raise ValueError(f"reference size m={m} exceeds dataset size {n}")
    if m == n:
        return np.arange(n)
    return _stratified_indices(dataset.labels, dataset.n_classes, m, np.random.default_rng(seed))


def select_reference(dataset: Dataset, m: int, seed=None) -> Dataset:
    """Uniform sample without replacement, stratified by class when ``m >= k``."""
    return dataset.subset(reference_indices(dataset, m, seed))


def holdout_split(dataset: Dataset, test_fraction: float, seed=None):
    """Stratified (train_indices, test_indices) split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    m = int(round(test_fraction * n))
    test = reference_indices(dataset, m, seed)
    train = np.setdiff1d(np.arange(n), test)
    return train, test


# -- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class ClientPartition:
    assignments: tuple

    def __post_init__(self):
        lists = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        object.__setattr__(self, "assignments", lists)

    def __len__(self):
        return len(self.assignments)

    def __getitem__(self, i):
        return self.assignments[i]

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def partition(dataset: Dataset, n_clients: int, scheme: str = "iid", alpha: float = 1.0,
              seed=None, max_tries: int = 100) -> ClientPartition:
    """Split sample indices across clients; each client's list is sorted."""
    n = len(dataset)
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    if n_clients > n:
        raise PartitionError(f"cannot give {n_clients} clients a sample each from {n} samples")
    rng = np.random.default_rng(seed)
    if n_clients == 1:
        return ClientPartition((np.arange(n),))

    if scheme == "iid":
        perm = rng.permutation(n)
        return ClientPartition(tuple(np.sort(p) for p in np.array_split(perm, n_clients)))

    if scheme == "dirichlet":
        if alpha <= 0:
            raise PartitionError("dirichlet alpha must be positive")
        for _ in range(max_tries):
            buckets = [[] for _ in range(n_clients)]
            for c in range(dataset.n_classes):
                idx = rng.permutation(np.flatnonzero(dataset.labels == c))
                if idx.size == 0:
                    continue
                props = rng.dirichlet(np.full(n_clients, alpha))
                cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
                for client, part in enumerate(np.split(idx, cuts)):
                    buckets[client].extend(part.tolist())
            if all(buckets):
                return ClientPartition(tuple(np.sort(np.array(b)) for b in buckets))
        raise PartitionError(f"dirichlet draw left a client empty after {max_tries} tries")

    raise PartitionError(f"unknown partition scheme {scheme!r}")


# -- poisoning ---------------------------------------------------------------

POISON_KINDS = ("none", "label_flip", "feature_noise")


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = "none"
    malicious_clients: tuple = ()
    poison_fraction: float = 1.0
    target_class: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise PoisonSpecError(f"unknown poison kind {self.kind!r}")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise PoisonSpecError("poison_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise PoisonSpecError("noise std must be non-negative")
        object.__setattr__(self, "malicious_clients",
                           tuple(sorted(set(int(c) for c in self.malicious_clients))))


@dataclass(frozen=True)
class PoisonMask:
    altered: np.ndarray
    malicious: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def apply_poison(dataset: Dataset, parts: ClientPartition, spec: PoisonSpec, seed=None):
    """Return ``(poisoned_dataset, mask)``; clean clients are never touched."""
    n_clients = len(parts)
    if any(c < 0 or c >= n_clients for c in spec.malicious_clients):
        raise PoisonSpecError(f"malicious client ids must lie in [0, {n_clients})")
    if spec.kind == "label_flip" and not 0 <= spec.target_class < dataset.n_classes:
        raise PoisonSpecError(f"target_class {spec.target_class} outside [0, {dataset.n_classes})")

    altered = np.zeros(len(dataset), dtype=bool)
    malicious = np.zeros(n_clients, dtype=bool)
    if spec.kind == "none":
        return dataset, PoisonMask(altered, malicious)

    features = dataset.features.copy()
    labels = dataset.labels.copy()
    client_seeds = as_seed_sequence(seed).spawn(n_clients)
    for c in spec.malicious_clients:
        malicious[c] = True
        rng = np.random.default_rng(client_seeds[c])
        idx = parts[c]
        n_alter = int(round(spec.poison_fraction * idx.size))
        chosen = np.sort(rng.choice(idx, size=n_alter, replace=False))
        altered[chosen] = True
        if spec.kind == "label_flip":
            new = np.full(chosen.size, spec.target_class)
            new[labels[chosen] == spec.target_class] = (spec.target_class + 1) % dataset.n_classes
            labels[chosen] = new
        else:
            noise = rng.normal(0.0, 1.0, size=(chosen.size, dataset.d_in)) * spec.noise_std
            features[chosen] = np.clip(features[chosen] + noise, 0.0, 1.0)
    return Dataset(features, labels, dataset.n_classes), PoisonMask(altered, malicious)
