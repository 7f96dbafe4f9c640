import json
import struct

import numpy as np
import pytest

from lowrank.container import load_container, save_container
from lowrank.errors import FormatError, IoError


def test_round_trip_is_byte_identical(tmp_path, rng):
    tensors = {
        "a": rng.normal(size=(3, 5)),
        "b": rng.normal(size=(4, 2)).astype(np.float32),
        "c": rng.normal(size=(2, 3, 4)),
    }
    p1, p2 = tmp_path / "one.st", tmp_path / "two.st"
    save_container(p1, tensors)
    loaded = load_container(p1)
    save_container(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)


def test_preserves_insertion_order(tmp_path, rng):
    tensors = {"z": rng.normal(size=(2, 2)), "a": rng.normal(size=(2, 2))}
    path = tmp_path / "t.st"
    save_container(path, tensors)
    assert list(load_container(path)) == ["z", "a"]


def test_truncated_payload_is_format_error(tmp_path):
    # declared 32x64 float32 but one element's worth of bytes missing
    header = {"w": {"dtype": "F32", "shape": [32, 64], "data_offsets": [0, 32 * 64 * 4]}}
    blob = json.dumps(header, separators=(",", ":")).encode()
    path = tmp_path / "bad.st"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"\x00" * (32 * 64 * 4 - 4))
    with pytest.raises(FormatError):
        load_container(path)


def test_offset_length_mismatch_is_format_error(tmp_path):
    header = {"w": {"dtype": "F64", "shape": [2, 2], "data_offsets": [0, 24]}}
    blob = json.dumps(header, separators=(",", ":")).encode()
    path = tmp_path / "bad.st"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"\x00" * 24)
    with pytest.raises(FormatError):
        load_container(path)


@pytest.mark.parametrize(
    "raw",
    [
        b"",
        b"\x01\x02\x03",  # shorter than the length field
        struct.pack("<Q", 10) + b"ab",  # header length beyond EOF
        struct.pack("<Q", 4) + b"nope",  # not JSON
        struct.pack("<Q", 2) + b"[]",  # JSON but not an object
    ],
)
def test_unreadable_header_is_format_error(tmp_path, raw):
    path = tmp_path / "bad.st"
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        load_container(path)


def test_unknown_dtype_tag_rejected(tmp_path):
    header = {"w": {"dtype": "I8", "shape": [2], "data_offsets": [0, 2]}}
    blob = json.dumps(header, separators=(",", ":")).encode()
    path = tmp_path / "bad.st"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"\x00\x00")
    with pytest.raises(FormatError):
        load_container(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_container(tmp_path / "does-not-exist.st")


def test_non_float_dtype_rejected_on_save(tmp_path):
    with pytest.raises(FormatError):
        save_container(tmp_path / "t.st", {"w": np.arange(4, dtype=np.int32)})
