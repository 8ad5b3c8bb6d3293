"""Binary weight files: a magic line followed by named float64 arrays.

Layout, all integers unsigned 32-bit little-endian::

    b"DFLW1\\n"
    repeated until end of file:
        name length, UTF-8 name bytes
        rank, one extent per axis
        prod(extents) float64 little-endian values
"""

from __future__ import annotations

import struct

import numpy as np

from .datapipe import atomic_write_bytes
from .errors import IoFailure, TruncatedFile, UnsupportedFormat

MAGIC = b"DFLW1\n"


def encode_params(params: dict) -> bytes:
    parts = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<{arr.ndim + 1}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_params(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise UnsupportedFormat("not a DFLW1 weight file (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFile(f"weight file ends inside a record at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise UnsupportedFormat(f"parameter name is not UTF-8 at byte {pos}") from e
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save(params: dict, path) -> None:
    atomic_write_bytes(path, encode_params(params))


def load(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise IoFailure(f"checkpoint not found: {path}") from e
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    return decode_params(data)
