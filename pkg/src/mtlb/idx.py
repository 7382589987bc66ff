"""Reader/writer for the IDX binary format used by the MNIST distribution.

Layout (big-endian): two zero bytes, a type byte (0x08 = unsigned byte), a
rank byte, then one uint32 per dimension, then the row-major payload.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
_RANKS = {LABELS_MAGIC: 1, IMAGES_MAGIC: 3}


def parse_idx(data: bytes):
    """Return ``(dims, payload)`` where ``payload`` is a flat uint8 array."""
    if len(data) < 4:
        raise FormatError("IDX stream shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in _RANKS:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    rank = _RANKS[magic]
    header = 4 + 4 * rank
    if len(data) < header:
        raise FormatError("IDX header truncated")
    dims = list(struct.unpack(f">{rank}I", data[4:header]))
    expected = int(np.prod(dims, dtype=np.int64))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if payload.size != expected:
        raise FormatError(
            f"IDX payload has {payload.size} bytes, header dims {dims} require {expected}"
        )
    return dims, payload


def serialize_idx(dims, payload) -> bytes:
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}.get(len(dims))
    if magic is None:
        raise FormatError(f"IDX writer supports rank 1 or 3, got {len(dims)}")
    payload = np.asarray(payload, dtype=np.uint8).ravel()
    if payload.size != int(np.prod(dims, dtype=np.int64)):
        raise FormatError("payload length does not match dims")
    return struct.pack(f">I{len(dims)}I", magic, *dims) + payload.tobytes()


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array shaped by its header."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        dims, payload = parse_idx(fh.read())
    return payload.reshape(dims)
