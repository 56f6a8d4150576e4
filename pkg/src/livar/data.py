"""Synthetic blob datasets and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PartitionError, ShapeError
from .seeding import make_rng

MAX_PARTITION_RETRIES = 100


@dataclass
class Dataset:
    features: np.ndarray  # n x dim
    labels: np.ndarray  # n, int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError("features must be a non-empty 2-D array", self.features.shape)
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("one label per row required", self.labels.shape, self.features.shape)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    beta: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def make_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed: int,
               center_scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, ``per_class`` rows per class, class-major order.

    Class means are standard normal (times ``center_scale``); rows are drawn
    around them with standard deviation ``spread``.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = make_rng(seed)
    means = center_scale * rng.standard_normal((num_classes, dim))
    noise = rng.standard_normal((num_classes, per_class, dim))
    x = (means[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y)


def train_test_split(ds: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Hold out the first ``test_per_class`` rows of every class."""
    test_idx, train_idx = [], []
    for c in np.unique(ds.labels):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size <= test_per_class:
            raise ValueError(f"class {c} has too few rows for the requested split")
        test_idx.append(rows[:test_per_class])
        train_idx.append(rows[test_per_class:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def _dirichlet(rng: np.random.Generator, beta: float, m: int) -> np.ndarray:
    g = rng.gamma(beta, 1.0, size=m)
    total = g.sum()
    if total <= 0.0:
        # every draw underflowed; the limit of Dirichlet(beta -> 0) is a vertex
        g = np.zeros(m)
        g[rng.integers(m)] = 1.0
        total = 1.0
    return g / total


def dirichlet_partition(labels, num_clients: int, beta: float, seed: int) -> Partition:
    """Split sample indices across clients with per-class Dirichlet proportions.

    For each class a proportion vector ``p ~ Dir(beta * 1)`` is drawn and the
    class's (shuffled) indices are split by multinomial counts under ``p``.
    The whole draw is repeated until no client is empty.
    """
    labels = np.asarray(labels)
    if num_clients < 2:
        raise ValueError("num_clients must be >= 2")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if labels.size < num_clients:
        raise PartitionError(f"{labels.size} samples cannot fill {num_clients} clients")
    rng = make_rng(seed)
    classes = np.unique(labels)
    for _ in range(MAX_PARTITION_RETRIES):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            p = _dirichlet(rng, beta, num_clients)
            counts = rng.multinomial(idx.size, p)
            for m, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[m].append(part)
        clients = [np.sort(np.concatenate(b)) for b in buckets]
        if all(c.size for c in clients):
            return Partition(client_indices=clients, beta=beta, seed=seed)
    raise PartitionError(
        f"could not give every one of {num_clients} clients a sample after "
        f"{MAX_PARTITION_RETRIES} draws; use a larger dataset or a larger beta"
    )


def class_histogram(partition: Partition, labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[idx], minlength=num_classes)
                     for idx in partition.client_indices])


def class_skew(partition: Partition, labels, num_classes: int) -> float:
    """Mean over clients of the largest class-proportion gap to the global mix."""
    labels = np.asarray(labels)
    hist = class_histogram(partition, labels, num_classes).astype(np.float64)
    local = hist / hist.sum(axis=1, keepdims=True)
    glob = np.bincount(labels, minlength=num_classes) / labels.size
    return float(np.abs(local - glob).max(axis=1).mean())


def save_csv(path: str | Path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([format(v, ".17g") for v in row] + [int(y)])


def load_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[-1] != "label":
            raise ValueError("dataset CSV must end with a 'label' column")
        rows = [row for row in r if row]
    x = np.array([[float(v) for v in row[:-1]] for row in rows])
    y = np.array([int(row[-1]) for row in rows])
    return Dataset(x, y)
