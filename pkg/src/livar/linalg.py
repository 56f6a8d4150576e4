"""Dense linear algebra helpers.

Matrices are plain 2-D ``float64`` numpy arrays (row-major). The functions
here add the shape checks and error types the rest of the package relies on,
plus a Lawson-Hanson NNLS solver and mid-rank percentile utilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, ShapeError

NNLS_TOL = 1e-10
NNLS_ITER_FACTOR = 10


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array", m.shape)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul dimension mismatch", a.shape, b.shape)
    return a @ b


def frobenius_dot(a, b) -> float:
    """Sum of the Hadamard product of two equally shaped matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("frobenius_dot shape mismatch", a.shape, b.shape)
    return float(np.dot(a.ravel(), b.ravel()))


@dataclass(frozen=True)
class NnlsSolution:
    coefficients: np.ndarray
    residual_norm: float
    iterations: int


def lawson_hanson(design: np.ndarray, target: np.ndarray, tol: float = NNLS_TOL,
                  max_iter: int | None = None) -> NnlsSolution:
    """Solve ``min ||design @ x - target||_2`` subject to ``x >= 0``.

    Classic active-set method (Lawson & Hanson, 1974). ``max_iter`` caps the
    number of unconstrained least-squares solves and defaults to ten times the
    number of columns. The dual-feasibility test uses ``tol`` scaled by
    ``max(1, ||design||_F * ||target||)`` so it is insensitive to units.
    """
    A = np.asarray(design, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64).ravel()
    m, n = A.shape
    if b.shape[0] != m:
        raise ShapeError("design/target mismatch", A.shape, b.shape)
    if max_iter is None:
        max_iter = NNLS_ITER_FACTOR * n
    scaled_tol = tol * max(1.0, float(np.linalg.norm(A) * np.linalg.norm(b)))

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    # indices whose admission produced no progress; cleared when x moves
    blocked = np.zeros(n, dtype=bool)
    iterations = 0

    def residual(v: np.ndarray) -> float:
        return float(np.linalg.norm(b - A @ v))

    while True:
        w = A.T @ (b - A @ x)
        candidates = ~passive & ~blocked
        if not candidates.any() or w[candidates].max() <= scaled_tol:
            break
        j = int(np.flatnonzero(candidates)[np.argmax(w[candidates])])
        passive[j] = True
        first_inner = True
        while True:
            if iterations >= max_iter:
                raise ConvergenceError(
                    f"NNLS did not converge in {max_iter} iterations",
                    best=NnlsSolution(x.copy(), residual(x), iterations),
                )
            iterations += 1
            s = np.zeros(n)
            s[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(s[passive] > 0):
                x = s
                blocked[:] = False
                break
            if first_inner and s[j] <= 0:
                # admitted index cannot move off zero: roundoff in w, skip it
                passive[j] = False
                blocked[j] = True
                break
            first_inner = False
            neg = np.flatnonzero(passive & (s <= 0))
            den = x[neg] - s[neg]
            ratios = np.divide(x[neg], den, out=np.zeros_like(den), where=den > 0)
            k = int(np.argmin(ratios))
            x = x + ratios[k] * (s - x)
            x[neg[k]] = 0.0
            leaving = passive & (x <= 0)
            x[leaving] = 0.0
            passive &= ~leaving
            blocked[:] = False
    x = np.maximum(x, 0.0)
    return NnlsSolution(x, residual(x), iterations)


def nnls_solve(atoms: Sequence, target) -> NnlsSolution:
    """Best non-negative combination of ``atoms`` approximating ``target``.

    Each atom is flattened row-major into one column of the design system.
    """
    if len(atoms) == 0:
        raise ValueError("nnls_solve needs at least one atom")
    t = np.asarray(target, dtype=np.float64)
    mats = [np.asarray(a, dtype=np.float64) for a in atoms]
    for a in mats:
        if a.shape != t.shape:
            raise ShapeError("atom/target shape mismatch", a.shape, t.shape)
    design = np.stack([a.ravel() for a in mats], axis=1)
    return lawson_hanson(design, t.ravel())


def percentile_ranks(values, population) -> np.ndarray:
    """Mid-rank percentile of each value: ``100 * (below + equal / 2) / n``."""
    pop = np.sort(np.asarray(population, dtype=np.float64).ravel())
    if pop.size == 0:
        raise ValueError("percentile population is empty")
    v = np.asarray(values, dtype=np.float64)
    below = np.searchsorted(pop, v, side="left")
    upto = np.searchsorted(pop, v, side="right")
    return 100.0 * (below + 0.5 * (upto - below)) / pop.size


def percentile_rank(value: float, population) -> float:
    return float(percentile_ranks(np.asarray([value]), population)[0])
