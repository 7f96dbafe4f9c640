"""Binary tensor container: ``[u64 LE header length][JSON header][raw data]``.

The JSON header maps tensor name -> {"dtype": "F32"|"F64", "shape": [...],
"data_offsets": [begin, end]} with offsets relative to the end of the header.
Tensor data is row-major, little-endian. Write order follows dict insertion
order, so a load/save round trip is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}


def dtype_tag(arr: np.ndarray) -> str:
    """Container tag ("F32"/"F64") for an array's dtype."""
    tag = _DTYPE_TAGS.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64 are storable")
    return tag


def save_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32/float64 tensors to ``path`` in insertion order."""
    header: dict[str, dict] = {}
    payload = bytearray()
    for name, arr in tensors.items():
        tag = dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        begin = len(payload)
        payload.extend(raw)
        header[name] = {
            "dtype": tag,
            "shape": [int(s) for s in arr.shape],
            "data_offsets": [begin, begin + len(raw)],
        }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(bytes(payload))
    except OSError as exc:
        raise IoError(f"cannot write container {path}: {exc}") from exc


def load_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container; returns tensors in file order, in their stored dtype."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read container {path}: {exc}") from exc

    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for a container header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise FormatError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable container header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: container header must be a JSON object")

    data = raw[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        tensors[name] = _decode_entry(path, name, entry, data)
    return tensors


def _decode_entry(path, name: str, entry: dict, data: bytes) -> np.ndarray:
    try:
        tag = entry["dtype"]
        shape = entry["shape"]
        begin, end = entry["data_offsets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header entry for {name!r}") from exc
    if tag not in _DTYPES:
        raise FormatError(f"{path}: tensor {name!r} has unknown dtype tag {tag!r}")
    if not all(isinstance(s, int) and s > 0 for s in shape):
        raise FormatError(f"{path}: tensor {name!r} has non-positive shape {shape}")
    dtype = _DTYPES[tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    if not (0 <= begin <= end <= len(data)):
        raise FormatError(f"{path}: tensor {name!r} offsets [{begin}, {end}] out of bounds")
    if end - begin != expected:
        raise FormatError(
            f"{path}: tensor {name!r} holds {end - begin} bytes, "
            f"shape {shape} ({tag}) requires {expected}"
        )
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=begin).reshape(shape).copy()
