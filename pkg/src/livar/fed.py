"""Federated round engine: local training, coefficient tables and merging.

One round: every client starts from the global backbone with fresh adapters,
trains with plain SGD while accumulating per-layer importance signals, then
reports its materialized deltas, head, per-class feature variances and
sample count. The server merges deltas and heads with the selected strategy,
folds the merged deltas into the frozen weights and evaluates on the test set.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import NumericalError, ShapeError
from .linalg import percentile_ranks
from .lora import ImportanceRecord, LoraAdapter, accumulate, delta
from .model import (
    ClassifierHead,
    ClassVarianceStats,
    ToyBackbone,
    accuracy,
    class_variances,
    fresh_adapters,
    loss_and_grads,
    mean_loss,
)
from .seeding import derive_seed, make_rng

STRATEGIES = ("livar", "fedavg", "livar_alpha_only", "livar_sigma_only")


# -- coefficient table ------------------------------------------------------

@dataclass(frozen=True)
class GShapTable:
    """3x3 lookup from (A-percentile bin, B-percentile bin) to a raw weight.

    Bins along each axis are ``q < t0``, ``t0 <= q <= t1`` and ``q > t1``.
    """

    a_thresholds: tuple[float, float] = (25.0, 50.0)
    b_thresholds: tuple[float, float] = (60.0, 80.0)
    cells: tuple[tuple[float, ...], ...] = ()
    base_value: float = 0.063

    def __post_init__(self):
        object.__setattr__(self, "a_thresholds", tuple(float(t) for t in self.a_thresholds))
        object.__setattr__(self, "b_thresholds", tuple(float(t) for t in self.b_thresholds))
        object.__setattr__(self, "cells", tuple(tuple(float(v) for v in row) for row in self.cells))
        for name, th in (("a_thresholds", self.a_thresholds), ("b_thresholds", self.b_thresholds)):
            if len(th) != 2 or not 0 < th[0] < th[1] < 100:
                raise ValueError(f"{name} must be two increasing cut points in (0, 100), got {th}")
        if len(self.cells) != 3 or any(len(row) != 3 for row in self.cells):
            raise ValueError("cells must be a 3x3 grid")
        if any(not (v > 0 and math.isfinite(v)) for row in self.cells for v in row):
            raise ValueError("all cells must be finite and > 0")

    @property
    def grid(self) -> np.ndarray:
        return np.array(self.cells)

    def a_bin(self, q):
        return _bin(q, self.a_thresholds)

    def b_bin(self, q):
        return _bin(q, self.b_thresholds)

    def to_dict(self) -> dict:
        return {
            "a_thresholds": list(self.a_thresholds),
            "b_thresholds": list(self.b_thresholds),
            "cells": [list(row) for row in self.cells],
            "base_value": self.base_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GShapTable":
        return cls(a_thresholds=d["a_thresholds"], b_thresholds=d["b_thresholds"],
                   cells=d["cells"], base_value=float(d.get("base_value", 0.063)))


def _bin(q, thresholds):
    q = np.asarray(q)
    lo, hi = thresholds
    return np.where(q < lo, 0, np.where(q <= hi, 1, 2))


def default_table() -> GShapTable:
    text = resources.files("livar").joinpath("gshap_default.json").read_text()
    return GShapTable.from_dict(json.loads(text))


def save_table(path: str | Path, table: GShapTable) -> None:
    Path(path).write_text(json.dumps(table.to_dict(), indent=2) + "\n")


def load_table(path: str | Path) -> GShapTable:
    return GShapTable.from_dict(json.loads(Path(path).read_text()))


# -- client side ------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 16
    rank: int = 4


@dataclass
class ClientUpdate:
    deltas: list[np.ndarray]
    importance: list[ImportanceRecord]
    head: ClassifierHead
    variance_stats: ClassVarianceStats
    sample_count: int
    loss: float = float("nan")

    def __post_init__(self):
        if len(self.deltas) != len(self.importance):
            raise ShapeError("one importance record per delta required",
                             (len(self.deltas),), (len(self.importance),))
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def sgd_train(backbone: ToyBackbone, head: ClassifierHead, data: Dataset, steps: int,
              lr: float, batch_size: int, rng: np.random.Generator
              ) -> tuple[ToyBackbone, ClassifierHead, list[ImportanceRecord]]:
    """Run ``steps`` minibatch SGD steps over reshuffled epochs of ``data``.

    Only adapters and the head move; importance signals accumulate per step.
    """
    adapters = [ad.copy() for ad in backbone.adapters]
    bb = ToyBackbone(backbone.frozen_weights, adapters)
    head = head.copy()
    records = [ImportanceRecord(layer_index=l + 1) for l in range(bb.num_layers)]
    n = len(data)
    done = 0
    # divergence surfaces as a non-finite loss below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        while done < steps:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                if done >= steps:
                    break
                idx = order[start:start + batch_size]
                loss, g = loss_and_grads(bb, head, data.features[idx], data.labels[idx])
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at step {done}")
                for l, ad in enumerate(adapters):
                    new_a = ad.a - lr * g.a[l]
                    new_b = ad.b - lr * g.b[l]
                    rec = accumulate(records[l], g.a[l], new_a - ad.a, "a")
                    records[l] = accumulate(rec, g.b[l], new_b - ad.b, "b")
                    ad.a, ad.b = new_a, new_b
                head.weights -= lr * g.head
                head.bias -= lr * g.bias
                done += 1
    return bb, head, records


def steps_for(n: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(n / batch_size)


def local_train(global_weights: Sequence[np.ndarray], global_head: ClassifierHead,
                data: Dataset, config: TrainConfig, seed: int,
                steps: int | None = None) -> ClientUpdate:
    """One client's round: fresh adapters, SGD, then signal collection.

    ``steps`` overrides the ``config.epochs`` budget with an exact step count.
    """
    if len(data) == 0:
        raise ValueError("client has no data")
    backbone = ToyBackbone(list(global_weights),
                           fresh_adapters(list(global_weights), config.rank, derive_seed(seed, 0)))
    if steps is None:
        steps = steps_for(len(data), config.epochs, config.batch_size)
    trained, head, records = sgd_train(backbone, global_head, data, steps, config.lr,
                                       config.batch_size, make_rng(derive_seed(seed, 1)))
    stats = class_variances(trained, head, data.features, data.labels)
    final_loss = mean_loss(trained, head, data.features, data.labels)
    if not math.isfinite(final_loss):
        raise NumericalError("non-finite loss after local training")
    return ClientUpdate(
        deltas=[delta(ad) for ad in trained.adapters],
        importance=records,
        head=head,
        variance_stats=stats,
        sample_count=len(data),
        loss=final_loss,
    )


# -- server side ------------------------------------------------------------

@dataclass
class MergeCoefficients:
    alpha: np.ndarray  # M x L


def omega_grid(updates: Sequence[ClientUpdate]) -> tuple[np.ndarray, np.ndarray]:
    oa = np.array([[r.omega_a for r in u.importance] for u in updates])
    ob = np.array([[r.omega_b for r in u.importance] for u in updates])
    return oa, ob


def alphas_from_omegas(omega_a: np.ndarray, omega_b: np.ndarray,
                       table: GShapTable) -> np.ndarray:
    """Pooled percentile ranks -> table lookup -> per-layer normalization."""
    qa = percentile_ranks(omega_a, omega_a.ravel())
    qb = percentile_ranks(omega_b, omega_b.ravel())
    raw = table.grid[table.a_bin(qa), table.b_bin(qb)]
    return raw / raw.sum(axis=0, keepdims=True)


def compute_alphas(updates: Sequence[ClientUpdate], table: GShapTable) -> MergeCoefficients:
    if not updates:
        raise ValueError("no client updates")
    L = len(updates[0].importance)
    if L == 0:
        raise ValueError("updates carry no layers")
    if any(len(u.importance) != L for u in updates):
        raise ShapeError("clients disagree on layer count",
                         *[(len(u.importance),) for u in updates])
    oa, ob = omega_grid(updates)
    return MergeCoefficients(alphas_from_omegas(oa, ob, table))


def merge_backbone(updates: Sequence[ClientUpdate], coeffs: MergeCoefficients) -> list[np.ndarray]:
    alpha = np.asarray(coeffs.alpha)
    L = len(updates[0].deltas)
    if alpha.shape != (len(updates), L):
        raise ShapeError("coefficient grid does not match updates", alpha.shape, (len(updates), L))
    merged = []
    for l in range(L):
        shape = updates[0].deltas[l].shape
        acc = np.zeros(shape)
        for m, u in enumerate(updates):
            if u.deltas[l].shape != shape:
                raise ShapeError(f"delta shape mismatch at layer {l + 1}", u.deltas[l].shape, shape)
            acc += alpha[m, l] * u.deltas[l]
        merged.append(acc)
    return merged


def _check_heads(updates: Sequence[ClientUpdate]) -> None:
    shape = updates[0].head.weights.shape
    for u in updates:
        if u.head.weights.shape != shape:
            raise ShapeError("head shape mismatch", u.head.weights.shape, shape)


def merge_heads(updates: Sequence[ClientUpdate]) -> ClassifierHead:
    """Per-class rows weighted by each client's share of that class's variance.

    A class nobody reports variance for falls back to the plain mean.
    """
    _check_heads(updates)
    sigma = np.stack([u.variance_stats.sigma for u in updates])  # M x C
    # scale by the per-class max so equal variances become exact ones and the
    # merge reduces to sum / M, the plain mean
    peak = sigma.max(axis=0)
    w = np.where(peak > 0, sigma / np.where(peak > 0, peak, 1.0), 1.0)
    total = w.sum(axis=0)
    heads = np.stack([u.head.weights for u in updates])  # M x C x F
    biases = np.stack([u.head.bias for u in updates])  # M x C
    return ClassifierHead((w[:, :, None] * heads).sum(axis=0) / total[:, None],
                          (w * biases).sum(axis=0) / total)


def sample_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.sample_count for u in updates], dtype=np.float64)
    return n / n.sum()


def fedavg_merge(updates: Sequence[ClientUpdate]) -> tuple[list[np.ndarray], ClassifierHead]:
    if not updates:
        raise ValueError("no client updates")
    _check_heads(updates)
    w = sample_weights(updates)
    L = len(updates[0].deltas)
    deltas = merge_backbone(updates, MergeCoefficients(np.repeat(w[:, None], L, axis=1)))
    head = ClassifierHead(
        sum(wi * u.head.weights for wi, u in zip(w, updates)),
        sum(wi * u.head.bias for wi, u in zip(w, updates)),
    )
    return deltas, head


# -- rounds -----------------------------------------------------------------

@dataclass
class GlobalState:
    weights: list[np.ndarray]
    head: ClassifierHead

    def backbone(self) -> ToyBackbone:
        """Backbone with zero adapters, for evaluation."""
        return ToyBackbone(self.weights, [LoraAdapter(np.zeros((1, w.shape[1])),
                                                      np.zeros((w.shape[0], 1)))
                                          for w in self.weights])


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    test_accuracy: float
    mean_client_loss: float
    client_losses: list[float]
    alphas: np.ndarray  # M x L, coefficients applied to the backbone deltas
    sigmas: np.ndarray  # M x C


def run_round(state: GlobalState, clients: Sequence[Dataset], test: Dataset, strategy: str,
              config: TrainConfig, round_index: int, seed: int,
              table: GShapTable | None = None, parallel: bool = False,
              ) -> tuple[GlobalState, RoundMetrics]:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if table is None:
        table = default_table()

    def client_job(m: int) -> ClientUpdate:
        return local_train(state.weights, state.head, clients[m], config,
                           derive_seed(seed, round_index, m))

    if parallel and len(clients) > 1:
        with ThreadPoolExecutor() as pool:
            updates = list(pool.map(client_job, range(len(clients))))
    else:
        updates = [client_job(m) for m in range(len(clients))]

    L = len(state.weights)
    if strategy in ("livar", "livar_alpha_only"):
        coeffs = compute_alphas(updates, table)
    else:
        coeffs = MergeCoefficients(np.repeat(sample_weights(updates)[:, None], L, axis=1))

    if strategy == "fedavg":
        deltas, head = fedavg_merge(updates)
    elif strategy == "livar":
        deltas, head = merge_backbone(updates, coeffs), merge_heads(updates)
    elif strategy == "livar_alpha_only":
        deltas = merge_backbone(updates, coeffs)
        head = fedavg_merge(updates)[1]
    else:
        deltas = fedavg_merge(updates)[0]
        head = merge_heads(updates)

    new_state = GlobalState([w + d for w, d in zip(state.weights, deltas)], head)
    losses = [u.loss for u in updates]
    metrics = RoundMetrics(
        round=round_index,
        strategy=strategy,
        test_accuracy=accuracy(new_state.backbone(), head, test.features, test.labels),
        mean_client_loss=float(np.mean(losses)),
        client_losses=losses,
        alphas=np.asarray(coeffs.alpha),
        sigmas=np.stack([u.variance_stats.sigma for u in updates]),
    )
    return new_state, metrics
