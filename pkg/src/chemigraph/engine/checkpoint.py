"""Versioned named-tensor archive.

Layout: magic ``CHKP``, u32 format version, u32 length + JSON config blob,
u32 entry count, then per tensor: u16 name length, name, u8 dtype code,
u8 ndim, u64 dims, raw little-endian C-order bytes.  Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"CHKP"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    config_bytes = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            dt = arr.dtype.newbyteorder("<")
            if np.dtype(dt) not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
            name_bytes = name.encode()
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(dt)], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(dt, copy=False).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive")
        version, config_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(fh.read(config_len))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            n = int(np.prod(shape)) if ndim else 1
            raw = fh.read(n * dtype.itemsize)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return config, tensors
