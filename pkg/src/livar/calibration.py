"""Proxy calibration of the merging-coefficient table.

A proxy federation of ``K`` clients trains one round next to a centralized
model on the pooled data. Per layer, NNLS finds the non-negative combination
of client deltas closest to the centralized delta; those ground-truth
coefficients are then averaged inside the same 3x3 percentile bins the
server uses, giving a table in the runtime format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Partition, dirichlet_partition, make_blobs
from .errors import ConfigError, LivarError
from .fed import ClientUpdate, GShapTable, TrainConfig, local_train, steps_for
from .linalg import nnls_solve, percentile_ranks
from .lora import ImportanceRecord
from .model import init_frozen_weights, zero_head
from .seeding import derive_seed

CELL_FLOOR = 1e-6


class DegenerateCalibrationError(LivarError, ValueError):
    """The proxy run produced nothing to regress on."""


@dataclass
class ProxyConfig:
    num_clients: int = 5
    beta: float = 0.5
    local_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 16
    rank: int = 4
    num_layers: int = 4
    width: int = 32
    input_dim: int = 16
    num_classes: int = 10
    per_class: int = 60
    spread: float = 1.5
    seed: int = 0
    joint_seed: int | None = None

    def validate(self) -> "ProxyConfig":
        for name in ("num_clients", "batch_size", "rank", "num_layers", "width", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if self.per_class < 2:
            raise ConfigError("per_class", "must be >= 2")
        if not self.beta > 0:
            raise ConfigError("beta", "must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.rank >= min(self.width, self.input_dim):
            raise ConfigError("rank", "must be smaller than every layer dimension")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.local_epochs, self.lr, self.batch_size, self.rank)

    def client_seed(self, m: int) -> int:
        return derive_seed(self.seed, 10, m)


@dataclass
class CalibrationRun:
    lambdas: np.ndarray  # K x L
    omegas: list[list[ImportanceRecord]]  # K x L
    residuals: np.ndarray  # L
    joint_deltas: list[np.ndarray]
    uniform_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def omega_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        oa = np.array([[r.omega_a for r in row] for row in self.omegas])
        ob = np.array([[r.omega_b for r in row] for row in self.omegas])
        return oa, ob


def solve_lambdas(client_deltas: Sequence[Sequence[np.ndarray]],
                  joint_deltas: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-layer NNLS of the joint delta on the client deltas.

    ``client_deltas[m][l]`` is client ``m``'s delta for layer ``l``. Returns
    ``(lambdas K x L, residual norms, residual norms of the uniform 1/K mix)``.
    """
    K = len(client_deltas)
    L = len(joint_deltas)
    lambdas = np.zeros((K, L))
    residuals = np.zeros(L)
    uniform = np.zeros(L)
    for l in range(L):
        atoms = [client_deltas[m][l] for m in range(K)]
        if not any(np.any(a) for a in atoms):
            raise DegenerateCalibrationError(f"every client delta is zero at layer {l + 1}")
        sol = nnls_solve(atoms, joint_deltas[l])
        lambdas[:, l] = sol.coefficients
        residuals[l] = sol.residual_norm
        uniform[l] = float(np.linalg.norm(joint_deltas[l] - sum(atoms) / K))
    return lambdas, residuals, uniform


def run_proxy(cfg: ProxyConfig) -> CalibrationRun:
    """Train the proxy clients and the joint model, then recover lambdas.

    The joint model gets the mean client step count on the pooled data.
    """
    cfg.validate()
    data = make_blobs(cfg.num_classes, cfg.input_dim, cfg.per_class, cfg.spread,
                      derive_seed(cfg.seed, 1))
    if cfg.num_clients == 1:
        partition = Partition([np.arange(len(data))], cfg.beta, cfg.seed)
    else:
        partition = dirichlet_partition(data.labels, cfg.num_clients, cfg.beta,
                                        derive_seed(cfg.seed, 2))
    clients = [data.subset(idx) for idx in partition.client_indices]
    dims = [cfg.input_dim] + [cfg.width] * cfg.num_layers
    weights = init_frozen_weights(dims, derive_seed(cfg.seed, 3))
    head = zero_head(cfg.num_classes, cfg.width)
    tc = cfg.train_config()

    updates: list[ClientUpdate] = [
        local_train(weights, head, ds, tc, cfg.client_seed(m)) for m, ds in enumerate(clients)
    ]
    pooled = data.subset(np.concatenate(partition.client_indices))
    budget = round(np.mean([steps_for(len(ds), tc.epochs, tc.batch_size) for ds in clients]))
    joint_seed = derive_seed(cfg.seed, 11) if cfg.joint_seed is None else cfg.joint_seed
    joint = local_train(weights, head, pooled, tc, joint_seed, steps=budget)

    lambdas, residuals, uniform = solve_lambdas([u.deltas for u in updates], joint.deltas)
    return CalibrationRun(
        lambdas=lambdas,
        omegas=[list(u.importance) for u in updates],
        residuals=residuals,
        joint_deltas=joint.deltas,
        uniform_residuals=uniform,
    )


def isotonic_increasing(values: Sequence[float]) -> np.ndarray:
    """Least-squares non-decreasing fit (pool adjacent violators, unit weights)."""
    blocks: list[list[float]] = []  # [mean, size]
    for v in values:
        blocks.append([float(v), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, n2 = blocks.pop()
            m1, n1 = blocks.pop()
            blocks.append([(m1 * n1 + m2 * n2) / (n1 + n2), n1 + n2])
    out: list[float] = []
    for mean, size in blocks:
        out.extend([mean] * int(size))
    return np.array(out)


def _fill_empty(sums: np.ndarray, counts: np.ndarray) -> np.ndarray:
    cells = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    known = ~np.isnan(cells)
    if not known.any():
        raise DegenerateCalibrationError("every table cell is empty")
    global_mean = float(cells[known].mean())
    # spread along the b axis until each row is full or has nothing to spread
    while True:
        nxt = cells.copy()
        for i in range(3):
            for j in range(3):
                if np.isnan(cells[i, j]):
                    nb = [cells[i, k] for k in (j - 1, j + 1)
                          if 0 <= k < 3 and not np.isnan(cells[i, k])]
                    if nb:
                        nxt[i, j] = float(np.mean(nb))
        if np.array_equal(np.isnan(nxt), np.isnan(cells)):
            break
        cells = nxt
    # rows with no members at all borrow the mean of their b column, then the global mean
    for i, j in zip(*np.nonzero(np.isnan(cells))):
        col = cells[:, j][~np.isnan(cells[:, j])]
        cells[i, j] = float(col.mean()) if col.size else global_mean
    return cells


def fit_table(run: CalibrationRun, a_thresholds=(25.0, 50.0), b_thresholds=(60.0, 80.0)) -> GShapTable:
    """Binned-mean estimate of the coefficient table from a calibration run."""
    oa, ob = run.omega_arrays()
    lam = np.asarray(run.lambdas)
    if lam.size == 0:
        raise DegenerateCalibrationError("calibration run is empty")
    probe = GShapTable(a_thresholds, b_thresholds, cells=[[1.0] * 3] * 3)
    ia = probe.a_bin(percentile_ranks(oa, oa.ravel())).ravel()
    ib = probe.b_bin(percentile_ranks(ob, ob.ravel())).ravel()
    sums = np.zeros((3, 3))
    counts = np.zeros((3, 3))
    np.add.at(sums, (ia, ib), lam.ravel())
    np.add.at(counts, (ia, ib), 1.0)
    cells = _fill_empty(sums, counts)
    cells = np.stack([isotonic_increasing(row) for row in cells])
    cells = np.maximum(cells, CELL_FLOOR)
    return GShapTable(a_thresholds, b_thresholds, cells=cells.tolist(),
                      base_value=float(lam.mean()))


@dataclass
class TrendReport:
    b_rows: list[bool]  # non-decreasing along b, one per a bin
    a_cols: list[bool]  # non-increasing along a, one per b bin

    @property
    def b_trend(self) -> bool:
        return all(self.b_rows)

    @property
    def a_trend(self) -> bool:
        return all(self.a_cols)

    @property
    def passed(self) -> bool:
        return self.b_trend and self.a_trend


def validate_trend(table: GShapTable) -> TrendReport:
    g = table.grid
    return TrendReport(
        b_rows=[bool(np.all(np.diff(g[i, :]) >= 0)) for i in range(3)],
        a_cols=[bool(np.all(np.diff(g[:, j]) <= 0)) for j in range(3)],
    )


def write_report(path: str | Path, run: CalibrationRun) -> None:
    """``layer,client,omega_a,omega_b,lambda,residual``; one row per (layer, client)."""
    oa, ob = run.omega_arrays()
    K, L = run.lambdas.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "client", "omega_a", "omega_b", "lambda", "residual"])
        for l in range(L):
            for m in range(K):
                w.writerow([l + 1, m] + [repr(float(v)) for v in
                                         (oa[m, l], ob[m, l], run.lambdas[m, l], run.residuals[l])])


def write_trend(path: str | Path, reports: dict[str, TrendReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "axis", "index", "passed"])
        for name, rep in reports.items():
            for i, ok in enumerate(rep.b_rows):
                w.writerow([name, "b_row", i, int(ok)])
            for j, ok in enumerate(rep.a_cols):
                w.writerow([name, "a_col", j, int(ok)])
