"""Model container: manifest schema, loading/saving, forward pass, synthetic generator.

A model is a stack of residual MLP blocks over a hidden dimension d. Each block
holds two dense slots, applied to column-token activations x (d x T):

    y = x + w2 @ act(w1 @ rms_norm(x))      w1: (h x d), w2: (d x h)

A slot is represented by exactly one of a dense matrix or an absorbed low-rank
pair (u: m x k, vt: k x n). All tensors live in a companion container file; the
manifest (JSON) names them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .container import load_container, save_container
from .errors import FormatError, IoError, ManifestMismatch, ShapeError
from .linalg import LowRankPair

SUPPORTED_VERSIONS = ("1",)
ACTIVATIONS = ("relu", "gelu", "identity")
BLOCK_SLOTS = ("w1", "w2")
RMS_EPS = 1e-12


@dataclass(frozen=True)
class LowRankRef:
    """Names of the stored factor tensors for one compressed slot."""

    u: str
    vt: str
    rank: int


@dataclass
class BlockSpec:
    block_id: int
    kind: str = "residual_mlp"
    matrices: dict[str, str] = field(default_factory=dict)
    lowrank: dict[str, LowRankRef] = field(default_factory=dict)


@dataclass
class ModelManifest:
    version: str
    hidden_dim: int
    activation: str
    blocks: list[BlockSpec]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "hidden_dim": self.hidden_dim,
            "activation": self.activation,
            "blocks": [
                {
                    "block_id": b.block_id,
                    "kind": b.kind,
                    "matrices": dict(b.matrices),
                    "lowrank": {
                        slot: {"u": ref.u, "vt": ref.vt, "rank": ref.rank}
                        for slot, ref in b.lowrank.items()
                    },
                }
                for b in self.blocks
            ],
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelManifest":
        try:
            version = doc["version"]
            hidden_dim = int(doc["hidden_dim"])
            activation = doc["activation"]
            blocks_doc = doc["blocks"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"manifest is missing required fields: {exc}") from exc
        if version not in SUPPORTED_VERSIONS:
            raise FormatError(f"unsupported manifest version {version!r}")
        if activation not in ACTIVATIONS:
            raise FormatError(f"unknown activation {activation!r}")
        if hidden_dim < 1:
            raise FormatError(f"hidden_dim must be positive, got {hidden_dim}")
        blocks = []
        for entry in blocks_doc:
            lowrank = {
                slot: LowRankRef(u=ref["u"], vt=ref["vt"], rank=int(ref["rank"]))
                for slot, ref in entry.get("lowrank", {}).items()
            }
            blocks.append(
                BlockSpec(
                    block_id=int(entry["block_id"]),
                    kind=entry.get("kind", "residual_mlp"),
                    matrices=dict(entry.get("matrices", {})),
                    lowrank=lowrank,
                )
            )
        return ModelManifest(version=version, hidden_dim=hidden_dim, activation=activation, blocks=blocks)


def slot_name(block_id: int, slot: str) -> str:
    return f"blocks.{block_id}.{slot}"


@dataclass
class ModelHandle:
    """An in-memory model: manifest plus float64 working copies of all tensors.

    ``storage_dtypes`` remembers each tensor's on-disk dtype tag so a save
    round-trips bit-identically. Treat a loaded handle as immutable.
    """

    manifest: ModelManifest
    tensors: dict[str, np.ndarray]
    storage_dtypes: dict[str, str]

    @property
    def hidden_dim(self) -> int:
        return self.manifest.hidden_dim

    def slot_ids(self) -> list[tuple[int, str]]:
        return [(b.block_id, slot) for b in self.manifest.blocks for slot in BLOCK_SLOTS]

    def block(self, block_id: int) -> BlockSpec:
        for b in self.manifest.blocks:
            if b.block_id == block_id:
                return b
        raise ManifestMismatch(f"no block {block_id} in manifest")

    def is_lowrank(self, block_id: int, slot: str) -> bool:
        return slot in self.block(block_id).lowrank

    def slot_pair(self, block_id: int, slot: str) -> LowRankPair | None:
        ref = self.block(block_id).lowrank.get(slot)
        if ref is None:
            return None
        return LowRankPair(u_sigma=self.tensors[ref.u], vt_sigma=self.tensors[ref.vt], rank=ref.rank)

    def slot_weight(self, block_id: int, slot: str) -> np.ndarray:
        """Dense matrix of the slot (materializes the product for low-rank slots)."""
        pair = self.slot_pair(block_id, slot)
        if pair is not None:
            return pair.product()
        return self.tensors[self.block(block_id).matrices[slot]]

    def slot_shape(self, block_id: int, slot: str) -> tuple[int, int]:
        pair = self.slot_pair(block_id, slot)
        if pair is not None:
            return pair.shape
        return self.tensors[self.block(block_id).matrices[slot]].shape

    def apply_slot(self, block_id: int, slot: str, x: np.ndarray) -> np.ndarray:
        pair = self.slot_pair(block_id, slot)
        if pair is not None:
            return pair.u_sigma @ (pair.vt_sigma @ x)
        return self.tensors[self.block(block_id).matrices[slot]] @ x

    def slot_param_count(self, block_id: int, slot: str) -> int:
        """Stored parameter count of the slot: m*n dense, k*(m+n) compressed."""
        pair = self.slot_pair(block_id, slot)
        if pair is not None:
            return pair.param_count()
        return self.tensors[self.block(block_id).matrices[slot]].size

    def param_count(self) -> int:
        return sum(self.slot_param_count(b, s) for b, s in self.slot_ids())


# --- forward pass -----------------------------------------------------------


def rms_norm(x: np.ndarray) -> np.ndarray:
    """Per-column RMS normalization of a (d x T) activation matrix."""
    scale = np.sqrt(np.mean(np.square(x), axis=0, keepdims=True) + RMS_EPS)
    return x / scale


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    if name == "identity":
        return x
    raise FormatError(f"unknown activation {name!r}")


def block_forward(model: ModelHandle, block_id: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One residual block on column tokens x (d x T).

    Returns (x_norm, hidden, y): the normalized input fed to w1, the
    post-activation hidden state fed to w2, and the block output.
    """
    x_norm = rms_norm(x)
    hidden = apply_activation(model.manifest.activation, model.apply_slot(block_id, "w1", x_norm))
    y = x + model.apply_slot(block_id, "w2", hidden)
    return x_norm, hidden, y


def forward(model: ModelHandle, sample: np.ndarray) -> np.ndarray:
    """Full forward over one sample (tokens x d); returns the final (tokens x d) output."""
    x = np.asarray(sample, dtype=np.float64).T
    for block in model.manifest.blocks:
        _, _, x = block_forward(model, block.block_id, x)
    return x.T


# --- validation, load, save -------------------------------------------------


def _validate(manifest: ModelManifest, tensors: dict[str, np.ndarray]) -> None:
    d = manifest.hidden_dim
    for block in manifest.blocks:
        if block.kind != "residual_mlp":
            raise FormatError(f"block {block.block_id}: unknown kind {block.kind!r}")
        shapes: dict[str, tuple[int, int]] = {}
        for slot in BLOCK_SLOTS:
            dense = slot in block.matrices
            pair = slot in block.lowrank
            if dense == pair:
                raise FormatError(
                    f"block {block.block_id} slot {slot}: must be exactly one of dense or low-rank"
                )
            if dense:
                name = block.matrices[slot]
                if name not in tensors:
                    raise ManifestMismatch(f"manifest references absent tensor {name!r}")
                if tensors[name].ndim != 2:
                    raise ShapeError(f"tensor {name!r} must be rank 2, got shape {tensors[name].shape}")
                shapes[slot] = tensors[name].shape
            else:
                ref = block.lowrank[slot]
                for tn in (ref.u, ref.vt):
                    if tn not in tensors:
                        raise ManifestMismatch(f"manifest references absent tensor {tn!r}")
                u, vt = tensors[ref.u], tensors[ref.vt]
                if u.ndim != 2 or vt.ndim != 2:
                    raise ShapeError(f"factor tensors of {slot} in block {block.block_id} must be rank 2")
                if u.shape[1] != ref.rank or vt.shape[0] != ref.rank:
                    raise ShapeError(
                        f"block {block.block_id} slot {slot}: inner dims {u.shape[1]}/{vt.shape[0]} "
                        f"do not match declared rank {ref.rank}"
                    )
                shapes[slot] = (u.shape[0], vt.shape[1])
        (m1, n1), (m2, n2) = shapes["w1"], shapes["w2"]
        if n1 != d or m2 != d:
            raise ShapeError(
                f"block {block.block_id} does not map hidden_dim {d} to itself: w1 {shapes['w1']}, w2 {shapes['w2']}"
            )
        if m1 != n2:
            raise ShapeError(
                f"block {block.block_id}: w1 output dim {m1} does not match w2 input dim {n2}"
            )


def load_model(manifest_path: str | Path, container_path: str | Path) -> ModelHandle:
    """Load and validate a model; tensors are materialized as float64 working copies."""
    try:
        doc = json.loads(Path(manifest_path).read_text("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    manifest = ModelManifest.from_json(doc)
    stored = load_container(container_path)
    _validate(manifest, stored)
    tensors = {name: arr.astype(np.float64) for name, arr in stored.items()}
    dtypes = {name: ("F32" if arr.dtype == np.float32 else "F64") for name, arr in stored.items()}
    return ModelHandle(manifest=manifest, tensors=tensors, storage_dtypes=dtypes)


def save_model(model: ModelHandle, manifest_path: str | Path, container_path: str | Path) -> None:
    """Write manifest and container; tensors are cast back to their storage dtype."""
    _validate(model.manifest, model.tensors)
    out: dict[str, np.ndarray] = {}
    for name, arr in model.tensors.items():
        tag = model.storage_dtypes.get(name, "F64")
        out[name] = arr.astype(np.float32 if tag == "F32" else np.float64)
    try:
        Path(manifest_path).write_text(json.dumps(model.manifest.to_json(), indent=2) + "\n", "utf-8")
    except OSError as exc:
        raise IoError(f"cannot write manifest {manifest_path}: {exc}") from exc
    save_container(container_path, out)


def save_compressed(model: ModelHandle, plan, factors: dict[str, LowRankPair], out_dir: str | Path) -> None:
    """Write the compressed model (manifest + container) for a compression plan.

    ``factors`` maps full slot names ("blocks.i.w1") to their factor pairs;
    slots the plan leaves at full retention stay dense. Writes
    ``out_dir/model.json`` and ``out_dir/model.st``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    compressed = as_compressed_handle(model, plan, factors)
    save_model(compressed, out_dir / "model.json", out_dir / "model.st")


def as_compressed_handle(model: ModelHandle, plan, factors: dict[str, LowRankPair]) -> ModelHandle:
    """Build the in-memory compressed model for a plan without touching disk."""
    planned = plan.slot_ranks()
    blocks: list[BlockSpec] = []
    tensors: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    for block in model.manifest.blocks:
        spec = BlockSpec(block_id=block.block_id, kind=block.kind)
        for slot in BLOCK_SLOTS:
            name = slot_name(block.block_id, slot)
            rank = planned.get(name)
            src_tag = model.storage_dtypes.get(block.matrices.get(slot, ""), "F64")
            if rank is None:
                spec.matrices[slot] = name
                tensors[name] = model.slot_weight(block.block_id, slot)
                dtypes[name] = src_tag
                continue
            pair = factors.get(name)
            if pair is None:
                raise ShapeError(f"plan compresses slot {name} but no factor pair was supplied")
            m, n = model.slot_shape(block.block_id, slot)
            if pair.u_sigma.shape != (m, pair.rank) or pair.vt_sigma.shape != (pair.rank, n):
                raise ShapeError(
                    f"slot {name}: factor shapes {pair.u_sigma.shape}/{pair.vt_sigma.shape} "
                    f"do not fit matrix {m}x{n} at rank {pair.rank}"
                )
            if pair.rank != rank:
                raise ShapeError(f"slot {name}: factor rank {pair.rank} differs from planned rank {rank}")
            u_name, vt_name = f"{name}.u", f"{name}.vt"
            spec.lowrank[slot] = LowRankRef(u=u_name, vt=vt_name, rank=pair.rank)
            tensors[u_name] = pair.u_sigma
            tensors[vt_name] = pair.vt_sigma
            dtypes[u_name] = dtypes[vt_name] = src_tag
        blocks.append(spec)
    manifest = ModelManifest(
        version=model.manifest.version,
        hidden_dim=model.manifest.hidden_dim,
        activation=model.manifest.activation,
        blocks=blocks,
    )
    return ModelHandle(manifest=manifest, tensors=tensors, storage_dtypes=dtypes)


# --- synthetic generator ----------------------------------------------------


def gen_synthetic(
    seed: int,
    blocks: int,
    d: int,
    h: int,
    n_samples: int = 64,
    tokens: int = 64,
    activation: str = "relu",
) -> tuple[ModelHandle, np.ndarray]:
    """Deterministic synthetic model plus calibration tensor (n_samples x tokens x d).

    Weights are zero-mean Gaussian scaled by 1/sqrt(fan_in); calibration
    samples are standard normal.
    """
    if min(blocks, d, h, n_samples, tokens) < 1:
        raise ShapeError("all synthetic sizes must be >= 1")
    rng = np.random.default_rng(seed)
    specs: list[BlockSpec] = []
    tensors: dict[str, np.ndarray] = {}
    for i in range(blocks):
        w1 = rng.normal(0.0, 1.0, size=(h, d)) / np.sqrt(d)
        w2 = rng.normal(0.0, 1.0, size=(d, h)) / np.sqrt(h)
        names = {slot: slot_name(i, slot) for slot in BLOCK_SLOTS}
        tensors[names["w1"]] = w1
        tensors[names["w2"]] = w2
        specs.append(BlockSpec(block_id=i, matrices=names))
    samples = rng.normal(0.0, 1.0, size=(n_samples, tokens, d))
    manifest = ModelManifest(version="1", hidden_dim=d, activation=activation, blocks=specs)
    handle = ModelHandle(
        manifest=manifest,
        tensors=tensors,
        storage_dtypes={name: "F64" for name in tensors},
    )
    return handle, samples


def save_calibration(path: str | Path, samples: np.ndarray) -> None:
    """Write a calibration tensor (n_samples x tokens x d) as a single-tensor container."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3:
        raise ShapeError(f"calibration tensor must be rank 3, got shape {samples.shape}")
    save_container(path, {"samples": samples})


def load_calibration(path: str | Path) -> np.ndarray:
    """Read the calibration tensor; validates rank-3 shape."""
    tensors = load_container(path)
    if "samples" not in tensors:
        raise ManifestMismatch(f"{path}: calibration container lacks a 'samples' tensor")
    samples = tensors["samples"].astype(np.float64)
    if samples.ndim != 3:
        raise ShapeError(f"{path}: calibration tensor must be rank 3, got shape {samples.shape}")
    return samples


def copy_handle(model: ModelHandle) -> ModelHandle:
    """Deep copy (used when a caller wants a mutable scratch model)."""
    return ModelHandle(
        manifest=copy.deepcopy(model.manifest),
        tensors={k: v.copy() for k, v in model.tensors.items()},
        storage_dtypes=dict(model.storage_dtypes),
    )
