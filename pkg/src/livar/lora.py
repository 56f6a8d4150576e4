"""Low-rank adapters and the per-layer importance accumulators."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .linalg import frobenius_dot
from .seeding import make_rng


@dataclass
class LoraAdapter:
    """Trainable pair for one frozen ``d x k`` layer; the update is ``b @ a``."""

    a: np.ndarray  # r x k
    b: np.ndarray  # d x r

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def num_params(self) -> int:
        d, k = self.shape
        return self.rank * (d + k)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy())


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def init_adapter(d: int, k: int, rank: int, seed: int) -> LoraAdapter:
    """Fresh adapter: ``b`` zero, ``a`` Kaiming-uniform with fan_in ``k``."""
    if not 1 <= rank < min(d, k):
        raise ValueError(f"rank must satisfy 1 <= rank < min(d, k) = {min(d, k)}, got {rank}")
    bound = kaiming_bound(k)
    a = make_rng(seed).uniform(-bound, bound, size=(rank, k))
    return LoraAdapter(a=a, b=np.zeros((d, rank)))


def delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.b @ adapter.a


@dataclass(frozen=True)
class ImportanceRecord:
    """Running importance of one layer's ``A`` and ``B`` factors."""

    layer_index: int
    omega_a: float = 0.0
    omega_b: float = 0.0


def accumulate(record: ImportanceRecord, grad, param_update, factor: str) -> ImportanceRecord:
    """Add ``<-grad, param_update>`` to the ``factor`` ("a" or "b") signal.

    ``param_update`` is the parameter value after one optimizer step minus the
    value before it, so a descending step contributes a positive increment.
    """
    grad = np.asarray(grad, dtype=np.float64)
    param_update = np.asarray(param_update, dtype=np.float64)
    if grad.shape != param_update.shape:
        raise ShapeError("gradient/update shape mismatch", grad.shape, param_update.shape)
    inc = -frobenius_dot(grad, param_update)
    if factor == "a":
        return replace(record, omega_a=record.omega_a + inc)
    if factor == "b":
        return replace(record, omega_b=record.omega_b + inc)
    raise ValueError(f"factor must be 'a' or 'b', got {factor!r}")
