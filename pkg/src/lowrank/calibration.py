"""Calibration capture: sample bucketing, activation recording, Gram accumulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import save_container
from .errors import NumericalError, ShapeError
from .model import ModelHandle, block_forward, slot_name


@dataclass
class BucketedCalib:
    """Calibration samples averaged into at most M buckets.

    ``mini_bsz = ceil(N / M)`` is the nominal samples-per-bucket; when M does
    not divide N the later buckets average fewer samples (counts records the
    actual sizes). Every source sample lands in exactly one bucket.
    """

    buckets: list[np.ndarray]
    mini_bsz: int
    source_count: int
    counts: list[int] = field(default_factory=list)


@dataclass
class CalibrationBatch:
    """Recorded activations of the original model over all buckets.

    per_matrix_inputs maps full slot names to the matrix of direct inputs of
    that slot (in_dim x total_tokens); per_block_io maps block ids to the
    (input, output) hidden-state pair around the whole residual block.
    """

    per_matrix_inputs: dict[str, np.ndarray]
    per_block_io: dict[int, tuple[np.ndarray, np.ndarray]]


def stack_of_batch(samples: Sequence[np.ndarray] | np.ndarray, m_buckets: int, seed: int) -> BucketedCalib:
    """Shuffle samples with a seeded permutation and average them into buckets.

    Produces min(N, M) buckets. With N >= M the first N mod M buckets average
    ceil(N/M) consecutive shuffled samples and the rest average floor(N/M), so
    all M buckets are filled; with M | N this is plain consecutive chunks of
    size N/M.
    """
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    n = len(arrs)
    if n < 1:
        raise ShapeError("need at least one calibration sample")
    if m_buckets < 1:
        raise ShapeError(f"bucket count must be >= 1, got {m_buckets}")
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ShapeError(f"sample {i} has shape {a.shape}, expected {shape}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    mini_bsz = math.ceil(n / m_buckets)

    n_buckets = min(n, m_buckets)
    base, extra = divmod(n, n_buckets)
    buckets: list[np.ndarray] = []
    counts: list[int] = []
    pos = 0
    for k in range(n_buckets):
        size = base + (1 if k < extra else 0)
        chunk = [arrs[j] for j in order[pos : pos + size]]
        pos += size
        buckets.append(np.mean(chunk, axis=0) if size > 1 else chunk[0].copy())
        counts.append(size)
    return BucketedCalib(buckets=buckets, mini_bsz=mini_bsz, source_count=n, counts=counts)


def capture_activations(model: ModelHandle, calib) -> CalibrationBatch:
    """Run the original model forward over all buckets and record activations.

    Accepts a BucketedCalib or any sequence of (tokens x d) sample arrays.
    Columns of every recorded matrix are all tokens across buckets, in bucket
    order. Raises NumericalError naming the block if the forward produces
    non-finite values.
    """
    buckets = getattr(calib, "buckets", calib)
    d = model.hidden_dim
    cols = []
    for sample in buckets:
        sample = np.asarray(sample, dtype=np.float64)
        if sample.ndim != 2 or sample.shape[1] != d:
            raise ShapeError(f"bucket shape {sample.shape} does not match hidden_dim {d}")
        cols.append(sample.T)
    # Every block op is per-column, so one pass over the concatenated token
    # columns (bucket order preserved) equals a bucket-by-bucket forward.
    x = np.concatenate(cols, axis=1)

    per_matrix: dict[str, np.ndarray] = {}
    per_block: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for block in model.manifest.blocks:
        x_norm, hidden, y = block_forward(model, block.block_id, x)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite activations in block {block.block_id}")
        per_matrix[slot_name(block.block_id, "w1")] = x_norm
        per_matrix[slot_name(block.block_id, "w2")] = hidden
        per_block[block.block_id] = (x, y)
        x = y
    return CalibrationBatch(per_matrix_inputs=per_matrix, per_block_io=per_block)


def gram_accumulate(x: np.ndarray) -> np.ndarray:
    """Second-moment matrix X @ X.T of an (n x T) activation matrix, symmetrized."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("activations contain non-finite entries")
    g = x @ x.T
    return (g + g.T) / 2.0


def dump_activations(batch: CalibrationBatch, model: ModelHandle, path: str | Path) -> None:
    """Debug dump of captured activations as a tensor container."""
    tensors: dict[str, np.ndarray] = {}
    for bid, (x_in, x_out) in sorted(batch.per_block_io.items()):
        tensors[f"block.{bid}.in"] = x_in
        tensors[f"block.{bid}.out"] = x_out
    for b, s in model.slot_ids():
        name = slot_name(b, s)
        tensors[f"slot.{name}.x"] = batch.per_matrix_inputs[name]
    save_container(path, tensors)


__all__ = [
    "BucketedCalib",
    "CalibrationBatch",
    "stack_of_batch",
    "capture_activations",
    "gram_accumulate",
    "dump_activations",
]
