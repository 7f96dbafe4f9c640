"""End-to-end orchestration: calibrate, whiten, plan, compensate, evaluate.

Slot compression order: bucket the calibration samples, capture activations of
the original model once, build the retention plan, then refit every planned
slot independently (optionally in parallel; merge order follows the manifest,
so outputs are deterministic for a fixed seed).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocation import IMPORTANCE_MODES, CompressionPlan, build_plan
from .calibration import capture_activations, gram_accumulate, stack_of_batch
from .compensation import LossTrace, compensate
from .errors import LowrankError, ManifestMismatch, NumericalError, ShapeError
from .linalg import LowRankPair, Whitener, cholesky_damped, gram_factor
from .model import (
    ModelHandle,
    as_compressed_handle,
    forward,
    load_calibration,
    slot_name,
)

OVERLAP_BINS = 64
MAX_WORKERS = 8
CHOLESKY_RETRIES = 5


@dataclass
class PipelineConfig:
    """Knobs of one compression run; mrr defaults to trr - 0.10 (floored at trr itself)."""

    trr: float
    mrr: float | None = None
    iterations: int = 1
    bucket_size: int = 32
    whiten: bool = True
    importance_mode: str = "cos"
    seed: int = 0
    rel_tol: float | None = None
    rel_damping: float = 1e-5

    def resolved_mrr(self) -> float:
        if self.mrr is not None:
            return self.mrr
        return self.trr - 0.10 if self.trr > 0.10 else self.trr

    def validate(self) -> None:
        if not 0.0 < self.trr <= 1.0:
            raise ShapeError(f"target retention must lie in (0, 1], got {self.trr}")
        mrr = self.resolved_mrr()
        if not 0.0 < mrr <= self.trr:
            raise ShapeError(f"need 0 < mrr <= trr, got mrr={mrr}, trr={self.trr}")
        if self.iterations < 0:
            raise ShapeError(f"iteration count must be >= 0, got {self.iterations}")
        if self.bucket_size < 1:
            raise ShapeError(f"bucket size must be >= 1, got {self.bucket_size}")
        if self.importance_mode not in IMPORTANCE_MODES:
            raise ShapeError(f"unknown importance mode {self.importance_mode!r}")
        if self.rel_tol is not None and self.rel_tol <= 0:
            raise ShapeError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.rel_damping < 0:
            raise ShapeError(f"rel_damping must be >= 0, got {self.rel_damping}")


def split_calibration(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reserve the last 20% of samples for evaluation; the rest are for fitting."""
    n_heldout = samples.shape[0] // 5
    n_fit = samples.shape[0] - n_heldout
    return samples[:n_fit], samples[n_fit:]


def compress_model(
    model: ModelHandle, calib_file: str | Path, cfg: PipelineConfig
) -> tuple[ModelHandle, CompressionPlan, dict[str, LossTrace]]:
    """Run the whole compression pipeline; deterministic for fixed inputs and seed."""
    cfg.validate()
    samples = load_calibration(calib_file)
    if samples.shape[2] != model.hidden_dim:
        raise ShapeError(
            f"calibration dim {samples.shape[2]} does not match model hidden_dim {model.hidden_dim}"
        )
    fit_samples, _ = split_calibration(samples)
    if fit_samples.shape[0] < 1:
        raise ShapeError("no calibration samples left for fitting")

    bucketed = stack_of_batch(list(fit_samples), cfg.bucket_size, cfg.seed)
    batch = capture_activations(model, bucketed)
    plan = build_plan(batch, model, cfg.trr, cfg.resolved_mrr(), cfg.importance_mode)

    tasks = []  # (full slot name, weight, activations, rank)
    for block_id, slot in model.slot_ids():
        name = slot_name(block_id, slot)
        rank = plan.slot_ranks()[name]
        if rank is None:
            continue
        tasks.append((name, model.slot_weight(block_id, slot), batch.per_matrix_inputs[name], rank))

    def run(task):
        name, w, x, rank = task
        try:
            gram = gram_accumulate(x)
            whitener = _whitener_with_retry(gram, cfg.rel_damping) if cfg.whiten else None
            # The refits and losses depend on x only through its Gram matrix,
            # so hand compensate the compact n x n factor instead of all tokens.
            return compensate(w, gram_factor(gram), rank, cfg.iterations, cfg.rel_tol, whitener)
        except LowrankError as exc:
            raise type(exc)(f"slot {name}: {exc}") from exc

    if len(tasks) > 1 and _worker_count(len(tasks)) > 1:
        with ThreadPoolExecutor(max_workers=_worker_count(len(tasks))) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    factors: dict[str, LowRankPair] = {}
    traces: dict[str, LossTrace] = {}
    for (name, _, _, _), (pair, trace) in zip(tasks, results):
        factors[name] = pair
        traces[name] = trace
    compressed = as_compressed_handle(model, plan, factors)
    return compressed, plan, traces


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("LOWRANK_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(cap, n_tasks, MAX_WORKERS))


def _whitener_with_retry(g: np.ndarray, rel_damping: float) -> Whitener:
    """Cholesky of the activation Gram matrix, retrying with 10x damping on failure."""
    damping = rel_damping
    last: NumericalError | None = None
    for _ in range(CHOLESKY_RETRIES + 1):
        try:
            return cholesky_damped(g, damping)
        except NumericalError as exc:
            last = exc
            damping = damping * 10.0 if damping > 0 else 1e-10
    raise NumericalError(f"whitening failed after {CHOLESKY_RETRIES} damping retries: {last}")


# --- evaluation ---------------------------------------------------------------


@dataclass
class SlotErrors:
    slot: str
    frob_rel_err: float
    data_rel_err: float


@dataclass
class EvalReport:
    per_slot: list[SlotErrors]
    output_mse: float
    output_cosine_mean: float
    overlap_statistic: float
    params_original: int
    params_compressed: int
    achieved_retention: float

    def to_json(self) -> dict:
        return {
            "per_slot": [
                {"slot": s.slot, "frob_rel_err": s.frob_rel_err, "data_rel_err": s.data_rel_err}
                for s in self.per_slot
            ],
            "end_to_end": {
                "output_mse": self.output_mse,
                "output_cosine_mean": self.output_cosine_mean,
                "overlap_statistic": self.overlap_statistic,
            },
            "params": {
                "original": self.params_original,
                "compressed": self.params_compressed,
                "achieved_retention": self.achieved_retention,
            },
        }


def _check_aligned(original: ModelHandle, compressed: ModelHandle) -> None:
    mo, mc = original.manifest, compressed.manifest
    if mo.hidden_dim != mc.hidden_dim or mo.activation != mc.activation:
        raise ManifestMismatch("models differ in hidden_dim or activation")
    if [b.block_id for b in mo.blocks] != [b.block_id for b in mc.blocks]:
        raise ManifestMismatch("models have different block structure")
    for block_id, slot in original.slot_ids():
        if original.slot_shape(block_id, slot) != compressed.slot_shape(block_id, slot):
            raise ManifestMismatch(
                f"slot {slot_name(block_id, slot)} shapes differ between the two models"
            )


def eval_compression(original: ModelHandle, compressed: ModelHandle, data: str | Path) -> EvalReport:
    """Per-slot and end-to-end error report over the held-out calibration tail."""
    _check_aligned(original, compressed)
    samples = load_calibration(data)
    if samples.shape[2] != original.hidden_dim:
        raise ShapeError(
            f"calibration dim {samples.shape[2]} does not match model hidden_dim {original.hidden_dim}"
        )
    _, heldout = split_calibration(samples)
    if heldout.shape[0] < 1:
        heldout = samples  # too few samples for a split; evaluate on everything

    batch = capture_activations(original, list(heldout))
    tiny = np.finfo(np.float64).tiny
    per_slot = []
    for block_id, slot in original.slot_ids():
        name = slot_name(block_id, slot)
        w = original.slot_weight(block_id, slot)
        x = batch.per_matrix_inputs[name]
        wx = w @ x
        pair = compressed.slot_pair(block_id, slot)
        if pair is None:
            w_hat = compressed.slot_weight(block_id, slot)
            what_x = w_hat @ x
        else:
            w_hat = pair.product()
            what_x = pair.u_sigma @ (pair.vt_sigma @ x)
        frob = float(np.linalg.norm(w_hat - w) / max(np.linalg.norm(w), tiny))
        data_err = float(np.linalg.norm(what_x - wx) / max(np.linalg.norm(wx), tiny))
        per_slot.append(SlotErrors(slot=name, frob_rel_err=frob, data_rel_err=data_err))

    last_block = original.manifest.blocks[-1].block_id
    out_orig = batch.per_block_io[last_block][1].T  # capture already ran the original
    stacked = heldout.reshape(-1, heldout.shape[2])  # block ops are per-token
    out_comp = forward(compressed, stacked)
    mse = float(np.mean((out_orig - out_comp) ** 2))
    norms = np.linalg.norm(out_orig, axis=1) * np.linalg.norm(out_comp, axis=1)
    dots = np.sum(out_orig * out_comp, axis=1)
    cosine = float(np.mean(dots / np.maximum(norms, tiny)))
    overlap = _histogram_overlap(out_orig.ravel(), out_comp.ravel())

    p_orig = original.param_count()
    p_comp = compressed.param_count()
    return EvalReport(
        per_slot=per_slot,
        output_mse=mse,
        output_cosine_mean=cosine,
        overlap_statistic=overlap,
        params_original=p_orig,
        params_compressed=p_comp,
        achieved_retention=p_comp / p_orig,
    )


def _histogram_overlap(a: np.ndarray, b: np.ndarray, bins: int = OVERLAP_BINS) -> float:
    """Intersection of the two value histograms over their common 64-bin range."""
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi - lo < 1e-300:
        return 1.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.minimum(ha / a.size, hb / b.size).sum())


# --- report emission ----------------------------------------------------------


def write_traces_csv(traces: dict[str, LossTrace], path: str | Path) -> None:
    """Per-slot loss trace: one row per half-step, half_step 0 is the initial loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "half_step", "loss"])
        for slot, trace in traces.items():
            writer.writerow([slot, 0, repr(trace.initial)])
            for i, loss in enumerate(trace.per_half_step, start=1):
                writer.writerow([slot, i, repr(loss)])


def write_json(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", "utf-8")
