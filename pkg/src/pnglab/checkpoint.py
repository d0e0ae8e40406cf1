"""Binary checkpoint format.

Layout: magic "PNGB", u32 version, u32 metadata byte length + UTF-8 JSON
metadata (carries the config echo), u32 tensor count, then per tensor:
u32 name length + name, u32 rank, u32 dims, little-endian float32 data.
Values are stored in 32-bit; everything is upcast to float64 on load.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .engine import Tensor
from .errors import DataError

MAGIC = b"PNGB"
VERSION = 1


def save_checkpoint(path, params: dict, metadata: dict) -> None:
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    metadata = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(dims)
        off += 4 * n
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return params, metadata
