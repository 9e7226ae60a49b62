"""Tolerance-based linear algebra at sample points.

Geometric ranks are decided by singular-value thresholding at a batch of
random points of the sampling domain. A rank is accepted as the locally
constant value when at least 80% of the valid points agree on it (the modal
rank); otherwise :class:`RankNotLocallyConstant` is raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FlatcheckError, RankNotLocallyConstant

ABS_ZERO = 1e-12
MODAL_FRACTION = 0.8


@dataclass(frozen=True)
class CheckConfig:
    n_points: int = 25
    tol_rel: float = 1e-9
    seed: int = 0
    max_resample: int = 50

    def __post_init__(self):
        if self.n_points < 5:
            raise ValueError("n_points must be at least 5")
        if not 0 < self.tol_rel < 1e-3:
            raise ValueError("tol_rel must lie in (0, 1e-3)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.max_resample < 1:
            raise ValueError("max_resample must be positive")


def _as_matrix(cols) -> np.ndarray:
    """Column list (or 2-d array whose columns are the vectors) as an array."""
    if isinstance(cols, np.ndarray) and cols.ndim == 2:
        return cols
    cols = list(cols)
    if not cols:
        return np.zeros((0, 0))
    return np.column_stack([np.asarray(c, dtype=float) for c in cols])


def singular_values(A) -> np.ndarray:
    """Singular values of a matrix or of each matrix in a (N, r, c) stack."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 0 or A.shape[-2] == 0:
        return np.zeros(A.shape[:-2] + (0,))
    return np.linalg.svd(A, compute_uv=False)


def _rank_from_sv(sv: np.ndarray, tol_rel: float) -> np.ndarray:
    if sv.shape[-1] == 0:
        return np.zeros(sv.shape[:-1], dtype=int)
    smax = sv[..., :1]
    keep = (sv > tol_rel * smax) & (smax > ABS_ZERO)
    return keep.sum(axis=-1)


def rank_at(cols, tol_rel: float = 1e-9) -> int:
    """Numerical rank of the span of ``cols`` at one point."""
    A = _as_matrix(cols)
    return int(_rank_from_sv(singular_values(A), tol_rel))


def ranks_at(stack: np.ndarray, tol_rel: float = 1e-9) -> np.ndarray:
    """Per-point ranks of a (N, rows, cols) stack."""
    stack = np.asarray(stack, dtype=float)
    if stack.shape[-1] == 0:
        return np.zeros(stack.shape[0], dtype=int)
    return _rank_from_sv(singular_values(stack), tol_rel)


def range_basis(A, tol_rel: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (as columns) of the column space of ``A``."""
    A = _as_matrix(A)
    if A.size == 0:
        return np.zeros((A.shape[0], 0))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = int(_rank_from_sv(s, tol_rel))
    return U[:, :r]


def in_span_at(v, cols, tol_rel: float = 1e-9) -> bool:
    """Whether ``v`` lies in the span of ``cols`` up to the relative tolerance."""
    return span_residual(v, cols, tol_rel) <= 1.0


def span_residual(v, cols, tol_rel: float = 1e-9) -> float:
    """Distance of ``v`` from span(cols) in units of the admissible tolerance.

    Values <= 1 mean "inside". The admissible distance is
    ``tol_rel * (1 + |v|) * guard`` where ``guard = sqrt(cond)`` of the
    retained part of the basis, capped at 1e3, so poorly conditioned bases
    get proportionally more slack.
    """
    v = np.asarray(v, dtype=float)
    A = _as_matrix(cols)
    nv = float(np.linalg.norm(v))
    if A.size == 0:
        return nv / (tol_rel * (1.0 + nv))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = int(_rank_from_sv(s, tol_rel))
    U = U[:, :r]
    resid = v - U @ (U.T @ v)
    guard = 1.0 if r == 0 else min(np.sqrt(s[0] / s[r - 1]), 1e3)
    return float(np.linalg.norm(resid)) / (tol_rel * (1.0 + nv) * guard)


def nullspace_at(matrix, tol_rel: float = 1e-9) -> np.ndarray:
    """Orthonormal kernel basis of ``matrix`` as columns (shape (cols, k))."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    ncols = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(ncols)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    r = int(_rank_from_sv(s, tol_rel))
    return Vt[r:].T.copy()


def corank(big_rank: int, small_rank: int) -> int:
    return big_rank - small_rank


def modal_rank(ranks, what: str = "distribution", fraction: float = MODAL_FRACTION) -> int:
    """Most common value of ``ranks``; raises if it is not shared by ``fraction`` of them."""
    ranks = np.asarray(ranks, dtype=int)
    if ranks.size == 0:
        raise RankNotLocallyConstant(f"no valid sample points to rank {what}", ranks=[])
    values, counts = np.unique(ranks, return_counts=True)
    k = int(np.argmax(counts))
    if counts[k] < fraction * ranks.size:
        raise RankNotLocallyConstant(
            f"rank of {what} is not locally constant: ranks {dict(zip(values.tolist(), counts.tolist()))}",
            ranks=ranks.tolist())
    return int(values[k])


def sample_domain(domain: dict, n: int, rng: np.random.Generator) -> dict:
    """Uniform samples from a product of intervals ``{name: (lo, hi)}``."""
    return {name: rng.uniform(lo, hi, size=n) for name, (lo, hi) in domain.items()}


def check_finite(values: dict):
    for k, v in values.items():
        if not np.all(np.isfinite(v)):
            raise FlatcheckError(f"non-finite value for {k}")
