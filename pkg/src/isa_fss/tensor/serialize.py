"""ISAT binary tensor container.

Layout, all little-endian::

    b"ISAT" | u8 version | u32 rank | u32 dim * rank | f64 payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Tensor

MAGIC = b"ISAT"
VERSION = 1


def dumps(tensor) -> bytes:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    header = MAGIC + struct.pack("<BI", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def loads(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not an ISAT container (bad magic)")
    version, rank = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported ISAT version {version}")
    offset = 4 + 5
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 8 * count:
        raise ValueError(f"ISAT payload holds {len(payload)} bytes, expected {8 * count}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(data)


def save_tensor(path, tensor) -> None:
    Path(path).write_bytes(dumps(tensor))


def load_tensor(path) -> Tensor:
    return loads(Path(path).read_bytes())
