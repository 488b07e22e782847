"""``NSF1`` tensor container.

Layout (all little-endian)::

    b"NSF1"
    repeated until EOF:
        u32 name_length, name (utf-8), u32 rank, u32 dims[rank], f32 payload
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

MAGIC = b"NSF1"


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            if a.ndim:
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    out: Dict[str, np.ndarray] = OrderedDict()
    pos = 4
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise ValueError(f"byte {pos}: truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"byte {pos}: truncated record ({exc})") from None
    return out
