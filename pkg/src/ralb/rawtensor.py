"""RTNS raw tensor files: b"RTNS", u32 ndim, u32 dims..., little-endian f32 data."""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTNS"


def write_rtns(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_rtns(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an RTNS file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(buf) - offset != 4 * count:
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
