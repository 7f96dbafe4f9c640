"""Truncation-error compensation: alternating pseudoinverse refits of the two factors.

The objective is the data-space compression loss

    loss(U, Vt) = || U @ Vt @ X - W @ X ||_F^2

The U-update solves the least-squares problem min_U ||A @ U.T - B||_F^2 with
A = X.T @ Vt.T and B = (W @ X).T through the Moore-Penrose pseudoinverse, which
is its global optimum for fixed Vt. The Vt-update pinv(U) @ W equals the exact
minimizer (U.T U)^-1 U.T W whenever X @ X.T is nonsingular (the Gram factor
cancels), and stays the applied rule otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankError, ShapeError
from .linalg import LowRankPair, SvdFactors, Whitener, pinv, svd_full, truncate_absorb


@dataclass
class LossTrace:
    """Data-space loss before any update and after every half-step (2 per iteration)."""

    initial: float
    per_half_step: list[float] = field(default_factory=list)
    iterations: int = 0

    def best(self) -> float:
        return min([self.initial, *self.per_half_step])


def svd_loss(pair: LowRankPair, w: np.ndarray, x: np.ndarray) -> float:
    """Squared Frobenius norm of (U @ Vt - W) @ X."""
    m, n = w.shape
    if pair.u_sigma.shape[0] != m or pair.vt_sigma.shape[1] != n:
        raise ShapeError(f"factor pair {pair.shape} does not match matrix {w.shape}")
    if x.shape[0] != n:
        raise ShapeError(f"activations have {x.shape[0]} rows, matrix has {n} columns")
    return _loss_against(pair, x, w @ x)


def _loss_against(pair: LowRankPair, x: np.ndarray, wx: np.ndarray) -> float:
    residual = pair.u_sigma @ (pair.vt_sigma @ x) - wx
    return float(np.sum(residual * residual))


def update_u(
    pair: LowRankPair,
    w: np.ndarray,
    x: np.ndarray,
    rel_tol: float | None = None,
    wx: np.ndarray | None = None,
) -> np.ndarray:
    """Minimum-norm least-squares refit of the left factor, right factor fixed.

    ``wx`` lets callers that already hold W @ X skip recomputing it.
    """
    if x.shape[1] < 1:
        raise ShapeError("need at least one activation column")
    a = x.T @ pair.vt_sigma.T               # T x k
    b = (w @ x if wx is None else wx).T     # T x m
    return (pinv(a, rel_tol) @ b).T         # m x k


def update_v(pair: LowRankPair, w: np.ndarray, rel_tol: float | None = None) -> np.ndarray:
    """Pseudoinverse refit of the right factor, left factor fixed: pinv(U) @ W."""
    return pinv(pair.u_sigma, rel_tol) @ w


def compensate(
    w: np.ndarray,
    x: np.ndarray,
    k: int,
    iters: int = 1,
    rel_tol: float | None = None,
    whitener: Whitener | None = None,
) -> tuple[LowRankPair, LossTrace]:
    """Truncated-SVD initialization plus ``iters`` alternating refit rounds.

    With a whitener, initialization truncates the SVD of W @ S and folds
    S^-1 back into the right factor; the refit objective is always the raw
    (unwhitened) data-space loss. Returns the pair from the half-step with the
    lowest recorded loss, so extra iterations are never harmful.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if iters < 0:
        raise RankError(f"iteration count must be >= 0, got {iters}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"activations have {x.shape[0]} rows, matrix has {w.shape[1]} columns")
    pair = initialize_pair(w, k, whitener)

    wx = w @ x
    best_loss = _loss_against(pair, x, wx)
    best_pair = pair
    trace = LossTrace(initial=best_loss, iterations=iters)
    for _ in range(iters):
        u = update_u(pair, w, x, rel_tol, wx=wx)
        pair = LowRankPair(u_sigma=u, vt_sigma=pair.vt_sigma, rank=k)
        loss = _loss_against(pair, x, wx)
        trace.per_half_step.append(loss)
        if loss < best_loss:
            best_loss, best_pair = loss, pair

        pair = LowRankPair(u_sigma=pair.u_sigma, vt_sigma=update_v(pair, w, rel_tol), rank=k)
        loss = _loss_against(pair, x, wx)
        trace.per_half_step.append(loss)
        if loss < best_loss:
            best_loss, best_pair = loss, pair
    return best_pair, trace


def initialize_pair(w: np.ndarray, k: int, whitener: Whitener | None = None) -> LowRankPair:
    """Plain or whitened truncated-SVD starting point at rank k."""
    if whitener is None:
        return truncate_absorb(svd_full(w), k)
    f: SvdFactors = svd_full(w @ whitener.s)
    pair = truncate_absorb(f, k)
    return LowRankPair(u_sigma=pair.u_sigma, vt_sigma=pair.vt_sigma @ whitener.s_inv, rank=k)


def plain_truncation_loss(w: np.ndarray, x: np.ndarray, k: int) -> float:
    """Data-space loss of unwhitened, uncompensated rank-k truncation (baseline)."""
    return svd_loss(truncate_absorb(svd_full(w), k), w, x)
