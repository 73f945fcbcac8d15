"""Binary tensor wire format ("RFTN").

Each tensor blob: 4-byte magic ``RFTN``, u8 dtype code (0 = float32), u8
rank, u16 reserved, four little-endian u32 dims (unused trailing dims are
zero), then the row-major little-endian float32 data. A request body is one
or more tensor blobs back to back, optionally followed by a JSON trailer of
scalar parameters; tensors always start with the magic, JSON never does.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RFTN"
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sBBH4I")
MAX_RANK = 4


class WireFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise WireFormatError(f"tensor rank {arr.ndim} outside 1..{MAX_RANK}")
    dims = list(arr.shape) + [0] * (MAX_RANK - arr.ndim)
    return _HEADER.pack(MAGIC, DTYPE_FLOAT32, arr.ndim, 0, *dims) + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    if len(buf) - offset < _HEADER.size:
        raise WireFormatError("buffer too short for tensor header")
    magic, dtype, rank, _, d0, d1, d2, d3 = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise WireFormatError(f"unsupported dtype code {dtype}")
    if rank < 1 or rank > MAX_RANK:
        raise WireFormatError(f"unsupported rank {rank}")
    dims = (d0, d1, d2, d3)[:rank]
    if any(d == 0 for d in dims):
        raise WireFormatError(f"zero-sized dim in {dims}")
    count = int(np.prod(dims))
    start = offset + _HEADER.size
    end = start + 4 * count
    if len(buf) < end:
        raise WireFormatError("tensor body truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims)
    return arr.copy(), end


def pack_body(tensors, trailer: dict | None = None) -> bytes:
    parts = [encode_tensor(t) for t in tensors]
    if trailer is not None:
        parts.append(json.dumps(trailer).encode("utf-8"))
    return b"".join(parts)


def unpack_body(buf: bytes):
    tensors = []
    offset = 0
    while len(buf) - offset >= _HEADER.size and buf[offset : offset + 4] == MAGIC:
        arr, offset = decode_tensor(buf, offset)
        tensors.append(arr)
    rest = buf[offset:]
    if rest.strip():
        try:
            trailer = json.loads(rest.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireFormatError(f"malformed JSON trailer: {exc}") from exc
    else:
        trailer = None
    return tensors, trailer
