"""Dense linear-algebra kernels: SVD, truncation, pseudoinverse, damped Cholesky."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError, RankError


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with sigma non-increasing."""

    u: np.ndarray        # m x r
    sigma: np.ndarray    # r, non-negative, sorted descending
    vt: np.ndarray       # r x n


@dataclass(frozen=True)
class LowRankPair:
    """Two absorbed factors replacing a dense matrix: ``w_hat = u_sigma @ vt_sigma``."""

    u_sigma: np.ndarray   # m x k
    vt_sigma: np.ndarray  # k x n
    rank: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u_sigma.shape[0], self.vt_sigma.shape[1])

    def product(self) -> np.ndarray:
        return self.u_sigma @ self.vt_sigma

    def param_count(self) -> int:
        return self.u_sigma.size + self.vt_sigma.size


@dataclass(frozen=True)
class Whitener:
    """Cholesky factor of a damped Gram matrix, with its inverse: ``s @ s.T = g + damping*I``."""

    s: np.ndarray       # lower triangular, n x n
    s_inv: np.ndarray   # n x n
    damping: float


def svd_full(a: np.ndarray) -> SvdFactors:
    """Thin SVD of a finite-valued matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise NumericalError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdFactors(u=u, sigma=s, vt=vt)


def truncate_absorb(f: SvdFactors, k: int) -> LowRankPair:
    """Keep the top-k singular triplets and absorb ``sqrt(sigma_k)`` into both factors."""
    r = f.sigma.shape[0]
    if not 1 <= k <= r:
        raise RankError(f"rank {k} outside [1, {r}]")
    root = np.sqrt(f.sigma[:k])
    return LowRankPair(u_sigma=f.u[:, :k] * root, vt_sigma=root[:, None] * f.vt[:k, :], rank=k)


def default_rel_tol(m: int, n: int) -> float:
    """Relative cutoff below which singular values are treated as zero."""
    return max(m, n) * np.finfo(np.float64).eps


def pinv(a: np.ndarray, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values ``sigma_i <= rel_tol * sigma_max`` are treated as exactly
    zero; an all-zero matrix yields the zero n x m matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if rel_tol is None:
        rel_tol = default_rel_tol(m, n)
    if rel_tol <= 0:
        raise NumericalError(f"rel_tol must be positive, got {rel_tol}")
    f = svd_full(a)
    sigma_max = f.sigma[0] if f.sigma.size else 0.0
    cutoff = rel_tol * sigma_max
    keep = f.sigma > cutoff
    inv_sigma = np.zeros_like(f.sigma)
    inv_sigma[keep] = 1.0 / f.sigma[keep]
    return (f.vt.T * inv_sigma) @ f.u.T


def rank_for_retention(m: int, n: int, r: float) -> int:
    """Largest rank whose factor pair stays within a retention-ratio parameter budget.

    k = floor(r * m * n / (m + n)), clamped to [1, min(m, n)], so that
    k * (m + n) <= r * m * n + (m + n).
    """
    if m < 1 or n < 1:
        raise RankError(f"matrix dims must be positive, got {m}x{n}")
    if not 0.0 < r <= 1.0:
        raise RankError(f"retention ratio must lie in (0, 1], got {r}")
    k = math.floor(r * m * n / (m + n))
    return max(1, min(k, min(m, n)))


def gram_factor(g: np.ndarray) -> np.ndarray:
    """Square factor y (n x n) of a PSD Gram matrix with ``y @ y.T = g``.

    Any factor with the same Gram matrix is interchangeable with the original
    activation matrix in least-squares refits and data-space losses (both
    depend on the activations only through X @ X.T), so this shrinks a long
    token matrix to n columns without changing results.
    """
    g = np.asarray(g, dtype=np.float64)
    try:
        vals, vecs = np.linalg.eigh(g)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition of Gram matrix failed: {exc}") from exc
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def cholesky_damped(g: np.ndarray, rel_damping: float) -> Whitener:
    """Cholesky factor of ``g + lambda*I`` with ``lambda = rel_damping * mean(diag(g))``.

    Raises NumericalError if the damped factorization fails; callers may retry
    with 10x the damping (at most 5 retries is the pipeline convention).
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise NumericalError(f"Gram matrix must be square, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("Gram matrix contains non-finite entries")
    damping = float(rel_damping) * float(np.mean(np.diag(g)))
    damped = g + damping * np.eye(g.shape[0])
    try:
        s = np.linalg.cholesky(damped)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky failed at damping {damping:g}: {exc}") from exc
    s_inv = scipy.linalg.solve_triangular(s, np.eye(g.shape[0]), lower=True, check_finite=False)
    return Whitener(s=s, s_inv=s_inv, damping=damping)
