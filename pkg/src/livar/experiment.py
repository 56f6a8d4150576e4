"""Experiment configuration and the multi-round driver used by the CLI."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Partition, dirichlet_partition, make_blobs, train_test_split
from .errors import ConfigError
from .fed import (
    STRATEGIES,
    GlobalState,
    GShapTable,
    RoundMetrics,
    TrainConfig,
    default_table,
    load_table,
    run_round,
)
from .model import init_frozen_weights, zero_head
from .seeding import derive_seed

# sub-seed streams derived from the master seed
DATA_STREAM = 1
PARTITION_STREAM = 2
BACKBONE_STREAM = 3
ROUND_STREAM = 4

ABLATION_GRID = (
    (False, False, "fedavg"),
    (True, False, "livar_alpha_only"),
    (False, True, "livar_sigma_only"),
    (True, True, "livar"),
)


@dataclass
class ExperimentConfig:
    num_clients: int = 10
    beta: float = 0.5
    rounds: int = 5
    local_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    strategy: str = "livar"
    num_layers: int = 4
    width: int = 32
    rank: int = 4
    num_classes: int = 10
    input_dim: int = 16
    per_class: int = 60
    test_per_class: int = 40
    spread: float = 1.5
    table: str | None = None

    def validate(self) -> "ExperimentConfig":
        for name in ("num_clients", "rounds", "num_layers", "width", "rank", "input_dim",
                     "per_class", "test_per_class", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError("beta", "must be > 0")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr", "must be > 0")
        if self.spread < 0:
            raise ConfigError("spread", "must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.rank >= min(self.width, self.input_dim):
            raise ConfigError("rank", "must be smaller than every layer dimension")
        if self.per_class < 2:
            raise ConfigError("per_class", "must be >= 2")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.local_epochs, lr=self.lr,
                           batch_size=self.batch_size, rank=self.rank)

    def dims(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.num_layers

    def load_table(self) -> GShapTable:
        return default_table() if self.table is None else load_table(self.table)


@dataclass
class Federation:
    train: Dataset
    test: Dataset
    partition: Partition
    clients: list[Dataset]
    initial: GlobalState


def build_federation(cfg: ExperimentConfig) -> Federation:
    ds = make_blobs(cfg.num_classes, cfg.input_dim, cfg.per_class + cfg.test_per_class,
                    cfg.spread, derive_seed(cfg.seed, DATA_STREAM))
    train, test = train_test_split(ds, cfg.test_per_class)
    if cfg.num_clients == 1:
        partition = Partition([np.arange(len(train))], cfg.beta, cfg.seed)
    else:
        partition = dirichlet_partition(train.labels, cfg.num_clients, cfg.beta,
                                        derive_seed(cfg.seed, PARTITION_STREAM))
    clients = [train.subset(idx) for idx in partition.client_indices]
    weights = init_frozen_weights(cfg.dims(), derive_seed(cfg.seed, BACKBONE_STREAM))
    head = zero_head(cfg.num_classes, cfg.width)
    return Federation(train, test, partition, clients, GlobalState(weights, head))


def run_experiment(cfg: ExperimentConfig, parallel: bool = False,
                   on_round: Callable[[RoundMetrics], None] | None = None,
                   ) -> tuple[GlobalState, list[RoundMetrics]]:
    cfg.validate()
    fed = build_federation(cfg)
    table = cfg.load_table()
    state = fed.initial
    history = []
    round_seed = derive_seed(cfg.seed, ROUND_STREAM)
    for t in range(cfg.rounds):
        state, metrics = run_round(state, fed.clients, fed.test, cfg.strategy,
                                   cfg.train_config(), t, round_seed, table, parallel)
        history.append(metrics)
        if on_round is not None:
            on_round(metrics)
    return state, history


@dataclass
class AblationRow:
    alpha: bool
    sigma: bool
    strategy: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def ablate(cfg: ExperimentConfig, seeds: Sequence[int], parallel: bool = False) -> list[AblationRow]:
    """Final accuracy of the four {alpha} x {sigma} variants under shared seeds."""
    rows = []
    for use_alpha, use_sigma, strategy in ABLATION_GRID:
        accs = []
        for s in seeds:
            run_cfg = ExperimentConfig(**{**cfg.to_dict(), "seed": s, "strategy": strategy})
            _, hist = run_experiment(run_cfg, parallel=parallel)
            accs.append(hist[-1].test_accuracy)
        rows.append(AblationRow(use_alpha, use_sigma, strategy, accs))
    return rows
