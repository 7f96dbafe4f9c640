"""Importance-aware retention allocation and compression planning.

Per-block importance is the mean cosine similarity between the token columns
entering and leaving the residual block. Normalized importances (mean 1) map
to retention ratios

    cr_b = mrr + i_n[b] * (trr - mrr)

clamped to [mrr, 1] and rescaled so the parameter-weighted mean retention hits
the target. Integer ranks start at the per-slot parameter-budget floor and are
then nudged by largest-remainder +-1 steps until the whole-model achieved
retention sits within 1% of the target (the floors alone systematically
undershoot); the recorded per-block ratios are not touched by this step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationBatch
from .errors import BudgetError, DegenerateImportance, ShapeError
from .linalg import rank_for_retention
from .model import BLOCK_SLOTS, ModelHandle, slot_name

IMPORTANCE_MODES = ("cos", "one_minus_cos")
BUDGET_TOL = 0.01  # fraction of trr
FULL_RETENTION_EPS = 1e-12


@dataclass
class BlockPlan:
    block_id: int
    importance: float
    normalized: float
    retention: float
    ranks: dict[str, int | None]  # slot -> rank; None keeps the slot dense


@dataclass
class CompressionPlan:
    per_block: list[BlockPlan]
    trr: float
    mrr: float
    achieved_retention: float
    importance_mode: str

    def slot_ranks(self) -> dict[str, int | None]:
        return {
            slot_name(b.block_id, slot): rank
            for b in self.per_block
            for slot, rank in b.ranks.items()
        }

    def to_json(self) -> dict:
        return {
            "blocks": [
                {
                    "block_id": b.block_id,
                    "importance": b.importance,
                    "normalized": b.normalized,
                    "retention": b.retention,
                    "ranks": dict(b.ranks),
                }
                for b in self.per_block
            ],
            "trr": self.trr,
            "mrr": self.mrr,
            "achieved_retention": self.achieved_retention,
            "importance_mode": self.importance_mode,
        }


def layer_importance(block_in: np.ndarray, block_out: np.ndarray) -> float:
    """Mean cosine similarity between corresponding input/output token columns.

    Zero-norm columns contribute similarity 0 and still count in the mean.
    """
    block_in = np.asarray(block_in, dtype=np.float64)
    block_out = np.asarray(block_out, dtype=np.float64)
    if block_in.shape != block_out.shape:
        raise ShapeError(f"input {block_in.shape} and output {block_out.shape} shapes differ")
    if block_in.ndim != 2 or block_in.shape[1] < 1:
        raise ShapeError(f"expected matrices with >= 1 token column, got shape {block_in.shape}")
    num = np.sum(block_in * block_out, axis=0)
    denom = np.linalg.norm(block_in, axis=0) * np.linalg.norm(block_out, axis=0)
    cos = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(np.mean(cos))


def normalize_importance(i_values) -> list[float]:
    """Mean-center importances so their average is exactly 1 (order preserved)."""
    values = np.asarray(list(i_values), dtype=np.float64)
    mean = float(np.mean(values))
    if abs(mean) < 1e-12:
        raise DegenerateImportance(f"importance mean {mean:g} is too close to zero to normalize")
    return [float(v) for v in values / mean]


def assign_ratios(i_n, trr: float, mrr: float, param_counts) -> list[float]:
    """Retention ratio per block: formula, clamp to [mrr, 1], budget rescale.

    Ratios above mrr are rescaled by a single scalar (up to 10 fixed-point
    passes) until the parameter-weighted mean retention is within 1% of trr.
    """
    _check_budget_bounds(trr, mrr)
    i_n = np.asarray(list(i_n), dtype=np.float64)
    params = np.asarray(list(param_counts), dtype=np.float64)
    if i_n.shape != params.shape:
        raise ShapeError(f"{i_n.size} importances vs {params.size} parameter counts")
    weights = params / params.sum()

    cap = 1.0 - mrr
    excess = np.clip(i_n * (trr - mrr), 0.0, None)
    tol = BUDGET_TOL * trr

    def attempt(scale: float) -> tuple[float, np.ndarray]:
        scaled = np.minimum(excess * scale, cap)
        return mrr + float(weights @ scaled), scaled

    scale = 1.0
    for _ in range(10):
        achieved, scaled = attempt(scale)
        if abs(achieved - trr) <= tol:
            return [float(mrr + e) for e in scaled]
        current = achieved - mrr
        if current <= 0.0:
            break
        scale *= (trr - mrr) / current

    # Heavy clamping can stall the multiplicative iteration even though the
    # budget is reachable; achieved is monotone in the scale, so bisect.
    lo, hi = 0.0, 1.0
    while attempt(hi)[0] < trr - tol and hi < 1e12:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        scale = (lo + hi) / 2.0
        achieved, scaled = attempt(scale)
        if abs(achieved - trr) <= tol:
            return [float(mrr + e) for e in scaled]
        if achieved < trr:
            lo = scale
        else:
            hi = scale
    raise BudgetError(f"cannot rescale ratios to retention {trr} within {100 * BUDGET_TOL:g}%")


def build_plan(
    calib: CalibrationBatch,
    model: ModelHandle,
    trr: float,
    mrr: float,
    importance_mode: str = "cos",
    budget_tol: float = BUDGET_TOL,
) -> CompressionPlan:
    """Importance scores, retention ratios, and integer ranks for every slot."""
    _check_budget_bounds(trr, mrr)
    if importance_mode not in IMPORTANCE_MODES:
        raise ShapeError(f"unknown importance mode {importance_mode!r}")
    blocks = model.manifest.blocks
    for b in blocks:
        if b.block_id not in calib.per_block_io:
            raise ShapeError(f"calibration lacks activations for block {b.block_id}")

    raw = [layer_importance(*calib.per_block_io[b.block_id]) for b in blocks]
    if importance_mode == "one_minus_cos":
        raw = [1.0 - v for v in raw]
    normalized = normalize_importance(raw)
    block_params = [
        sum(int(np.prod(model.slot_shape(b.block_id, slot))) for slot in BLOCK_SLOTS)
        for b in blocks
    ]
    ratios = assign_ratios(normalized, trr, mrr, block_params)

    slots = []  # (block_idx, slot, m, n)
    for bi, b in enumerate(blocks):
        for slot in BLOCK_SLOTS:
            m, n = model.slot_shape(b.block_id, slot)
            slots.append((bi, slot, m, n))
    ranks = {
        (bi, slot): _initial_rank(m, n, ratios[bi])
        for bi, slot, m, n in slots
    }
    achieved = _adjust_ranks_to_budget(slots, ranks, ratios, trr, budget_tol)

    per_block = []
    for bi, b in enumerate(blocks):
        per_block.append(
            BlockPlan(
                block_id=b.block_id,
                importance=raw[bi],
                normalized=normalized[bi],
                retention=ratios[bi],
                ranks={slot: ranks[(bi, slot)] for slot in BLOCK_SLOTS},
            )
        )
    return CompressionPlan(
        per_block=per_block,
        trr=trr,
        mrr=mrr,
        achieved_retention=achieved,
        importance_mode=importance_mode,
    )


def _check_budget_bounds(trr: float, mrr: float) -> None:
    if not 0.0 < mrr <= trr <= 1.0:
        raise BudgetError(f"need 0 < mrr <= trr <= 1, got mrr={mrr}, trr={trr}")


def _initial_rank(m: int, n: int, ratio: float) -> int | None:
    """Parameter-budget floor rank, or None when the slot should stay dense."""
    if ratio >= 1.0 - FULL_RETENTION_EPS:
        return None
    k = rank_for_retention(m, n, ratio)
    if k * (m + n) >= m * n:  # pair would not be smaller than the dense matrix
        return None
    return k


def _slot_params(m: int, n: int, rank: int | None) -> int:
    return m * n if rank is None else rank * (m + n)


def _adjust_ranks_to_budget(slots, ranks, ratios, trr: float, budget_tol: float) -> float:
    """Largest-remainder +-1 rank steps until achieved retention is within the band."""
    total = sum(m * n for _, _, m, n in slots)
    target = trr * total
    current = sum(_slot_params(m, n, ranks[(bi, slot)]) for bi, slot, m, n in slots)

    def remainder(bi, slot, m, n):
        k = ranks[(bi, slot)]
        return 0.0 if k is None else ratios[bi] * m * n / (m + n) - k

    while True:
        gap = target - current
        if gap > 0:
            candidates = [
                (bi, slot, m, n)
                for bi, slot, m, n in slots
                if ranks[(bi, slot)] is not None
                and ranks[(bi, slot)] < min(m, n)
                and (ranks[(bi, slot)] + 1) * (m + n) < m * n
                and abs(gap - (m + n)) < abs(gap)
            ]
            step = 1
            key = lambda c: (-remainder(*c), c[0], c[1])
        else:
            candidates = [
                (bi, slot, m, n)
                for bi, slot, m, n in slots
                if ranks[(bi, slot)] is not None
                and ranks[(bi, slot)] > 1
                and abs(gap + (m + n)) < abs(gap)
            ]
            step = -1
            key = lambda c: (remainder(*c), c[0], c[1])
        if not candidates:
            break  # no step improves the budget
        bi, slot, m, n = min(candidates, key=key)
        ranks[(bi, slot)] += step
        current += step * (m + n)

    achieved = current / total
    if abs(achieved - trr) > budget_tol * trr:
        raise BudgetError(
            f"achieved retention {achieved:.4f} cannot reach {trr} within "
            f"{100 * budget_tol:g}% with the available rank granularity"
        )
    return achieved
