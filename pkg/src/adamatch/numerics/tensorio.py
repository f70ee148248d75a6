"""Binary tensor file format shared by every module.

Layout: magic b"ADMT", u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
little-endian u32 dims, then the row-major payload in the stated dtype,
little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractViolation

MAGIC = b"ADMT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    # ascontiguousarray promotes rank 0 to rank 1; keep the original shape
    array = np.ascontiguousarray(array).reshape(array.shape)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ContractViolation(f"unsupported dtype {array.dtype} for tensor file")
    if array.ndim > 255:
        raise ContractViolation("rank exceeds format limit")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", 1, code, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype(_DTYPES[code], copy=False).tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractViolation(f"{path}: not a tensor file (bad magic {magic!r})")
        version, code, rank = struct.unpack("<BBB", fh.read(3))
        if version != 1:
            raise ContractViolation(f"{path}: unsupported tensor file version {version}")
        if code not in _DTYPES:
            raise ContractViolation(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ContractViolation(f"{path}: truncated tensor payload")
        data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return data.astype(dtype.newbyteorder("="))
