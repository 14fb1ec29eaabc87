"""The LLSF binary checkpoint container.

Layout (little-endian): magic ``b"LLSF"``, format version u32, entry count
u32, then per entry: name length u16, UTF-8 name, rank u8, each dim u32,
dtype tag u8 (0 = f32, 1 = f64), raw values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION

MAGIC = b"LLSF"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    try:
        return _decode(blob)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None


def _decode(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an LLSF checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        (tag,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated data for {name}")
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(entries))


def load(path) -> dict:
    return decode(Path(path).read_bytes())
