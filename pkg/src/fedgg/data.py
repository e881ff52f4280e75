"""Datasets, CSV I/O and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


class DatasetNotFoundError(DataError, FileNotFoundError):
    pass


class RaggedRowsError(DataError):
    pass


class NonContiguousLabelsError(DataError):
    pass


class PartitionError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-d matrix, got shape {x.shape}")
        if y.size != x.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.size} labels")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: list[np.ndarray]
    beta: float
    seed: int | None = None

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.client_indices]


def generate_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                   rng: np.random.Generator) -> Dataset:
    """Unit-variance Gaussian blobs, one per class.

    Centers sit on a regular polygon in the first two coordinates, with the
    radius chosen so neighbouring centers are exactly ``separation`` apart
    (non-neighbours are further). Samples are returned in class order.
    """
    if num_classes < 2 or per_class < 1 or dim < 2 or not separation > 0:
        raise DataError("need num_classes >= 2, per_class >= 1, dim >= 2, separation > 0")
    radius = separation / (2.0 * math.sin(math.pi / num_classes))
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    noise = rng.standard_normal((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(centers[labels] + noise, labels, num_classes)


def train_test_split(dataset: Dataset, test_fraction: float,
                     rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if not 0 < n_test < n:
        raise DataError(f"test fraction {test_fraction} leaves an empty split of {n} samples")
    perm = rng.permutation(n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            # repr() of a float round-trips exactly.
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path) -> Dataset:
    if not os.path.isfile(path):
        raise DatasetNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        width = len(header)
        if width < 2 or header[-1].strip() != "label":
            raise DataError(f"{path}: header must be f0,...,f{{d-1}},label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRowsError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise DataError(f"{path}: no data rows")
    present = set(labels)
    num_classes = max(labels) + 1
    if min(labels) < 0 or len(present) != num_classes:
        missing = sorted(set(range(num_classes)) - present)
        raise NonContiguousLabelsError(f"{path}: labels are not 0..{num_classes - 1}; missing {missing}")
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels), num_classes)


def _apportion(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Split ``total`` into integer counts roughly proportional to ``weights``.

    Largest-remainder rounding; counts never exceed ``caps``. Whatever a
    capped entry cannot take is redistributed proportionally to the spare
    capacity of the others. Requires ``caps.sum() >= total``.
    """
    counts = np.zeros_like(caps)
    remaining = total
    w = weights.astype(np.float64).copy()
    while remaining > 0:
        spare = caps - counts
        w = np.where(spare > 0, w, 0.0)
        if w.sum() <= 0:
            w = spare.astype(np.float64)
        share = remaining * w / w.sum()
        base = np.floor(share).astype(np.int64)
        short = remaining - int(base.sum())
        if short > 0:
            # Ties break toward the lower class index (stable sort).
            order = np.argsort(-(share - base), kind="stable")
            base[order[:short]] += 1
        take = np.minimum(base, spare)
        counts += take
        remaining -= int(take.sum())
        # Next pass spreads the overflow by spare capacity alone.
        w = (caps - counts).astype(np.float64)
    return counts


def dirichlet_partition(dataset: Dataset, num_clients: int, beta: float,
                        rng: np.random.Generator) -> PartitionPlan:
    """Assign every sample to one of ``num_clients`` clients with Dirichlet label skew.

    Each client draws a class mix ``p ~ Dirichlet(beta)`` (normalised Gamma
    draws) and fills a quota of about ``n / num_clients`` samples from the
    class pools in proportion to ``p``. Classes that run dry hand their share
    to the pools that still have samples, so nothing is left over.
    """
    n = len(dataset)
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    if not beta > 0:
        raise PartitionError(f"beta must be > 0, got {beta}")
    if n < num_clients:
        raise PartitionError(f"{n} samples cannot cover {num_clients} clients")

    m = dataset.num_classes
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(m)]
    avail = np.array([p.size for p in pools], dtype=np.int64)
    taken_from = np.zeros(m, dtype=np.int64)
    quotas = [n // num_clients + (1 if i < n % num_clients else 0) for i in range(num_clients)]

    clients: list[np.ndarray] = []
    for quota in quotas:
        g = rng.gamma(beta, 1.0, size=m)
        if g.sum() > 0:
            p = g / g.sum()
        else:
            # Every Gamma draw underflowed (tiny beta): fall back to one class.
            p = np.zeros(m)
            p[rng.integers(m)] = 1.0
        counts = _apportion(quota, p, avail - taken_from)
        parts = []
        for c in np.flatnonzero(counts):
            start = taken_from[c]
            parts.append(pools[c][start:start + counts[c]])
            taken_from[c] += counts[c]
        clients.append(np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64))

    # Unreachable with equal quotas and n >= N, kept as a guard for the invariant.
    for i, ix in enumerate(clients):
        if ix.size == 0:
            donor = max(range(num_clients), key=lambda j: (clients[j].size, -j))
            clients[i] = clients[donor][-1:]
            clients[donor] = clients[donor][:-1]

    return PartitionPlan(client_indices=clients, beta=float(beta))


def partition_stats(plan: PartitionPlan, dataset: Dataset) -> np.ndarray:
    """Client-by-class sample counts."""
    out = np.zeros((plan.num_clients, dataset.num_classes), dtype=np.int64)
    n = len(dataset)
    for i, ix in enumerate(plan.client_indices):
        ix = np.asarray(ix, dtype=np.int64)
        if ix.size and (ix.min() < 0 or ix.max() >= n):
            raise PartitionError(f"client {i} references an index outside 0..{n - 1}")
        out[i] = np.bincount(dataset.labels[ix], minlength=dataset.num_classes)
    return out


def label_entropy(counts: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy (nats) of a count matrix."""
    counts = np.asarray(counts, dtype=np.float64)
    p = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def write_partition_stats(counts: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "class", "count"])
        for i, row in enumerate(counts):
            for c, k in enumerate(row):
                w.writerow([i, c, int(k)])
