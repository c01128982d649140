"""Binary checkpoint format shared by every model.

Layout, all little-endian:
    magic "OFOH" | format version (u32) | tensor count (u32) |
    per tensor: name length (u32), UTF-8 name, rank (u32),
    one u32 per dim, then float32 values in row-major order.

Values are stored as float32; loading returns float64 arrays holding those
exact float32 values, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"OFOH"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr32.ndim))
        for dim in arr32.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr32.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", view, 8)
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, offset)
        offset += 4
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", view, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", view, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(view, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        tensors[name] = values.astype(np.float64).reshape(dims)
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after last tensor")
    return tensors
