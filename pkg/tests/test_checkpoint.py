import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from llsrflow import CHECKPOINT_FORMAT_VERSION
from llsrflow.checkpoint import CheckpointError, decode, encode, load, save


def test_layout_by_hand():
    blob = encode({"w": np.array([1.5, -2.0], dtype=np.float32)})
    want = b"LLSF" + struct.pack("<II", CHECKPOINT_FORMAT_VERSION, 1)
    want += struct.pack("<H", 1) + b"w" + struct.pack("<BI", 1, 2) + struct.pack("<B", 0)
    want += struct.pack("<2f", 1.5, -2.0)
    assert blob == want


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.one_of(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4)),
                                 arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4))),
                       max_size=5))
def test_bit_exact_roundtrip(entries):
    out = decode(encode(entries))
    assert list(out) == list(entries)
    for k, v in entries.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        assert out[k].tobytes() == v.tobytes()


def test_file_roundtrip(tmp_path):
    entries = {"encoder/stem/w": np.arange(6.0).reshape(2, 3), "flow/L0/S0/actnorm/logs": np.zeros(4, np.float32)}
    save(tmp_path / "sub" / "m.llsf", entries)
    back = load(tmp_path / "sub" / "m.llsf")
    assert all(back[k].tobytes() == v.tobytes() for k, v in entries.items())


def test_corrupt_inputs():
    blob = encode({"a": np.ones((2, 2))})
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(blob[:4] + struct.pack("<I", 999) + blob[8:])
    with pytest.raises(CheckpointError):
        decode(blob[:-3])
    with pytest.raises(CheckpointError):
        decode(blob[:14])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(blob + b"\0")
    bad_tag = bytearray(blob)
    bad_tag[12 + 2 + 1 + 1 + 8] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        decode(bytes(bad_tag))
