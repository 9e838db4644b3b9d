"""Binary checkpoint format for named parameter sets.

Layout: magic bytes "HEXFLEET1", then one record per parameter in sorted
name order: name length (u64 LE), UTF-8 name, rank (u64 LE), dims (u64 LE
each), values (f64 LE, row-major). Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"HEXFLEET1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    chunks = [MAGIC]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes (expected {MAGIC!r})")
    out: dict[str, np.ndarray] = {}
    off = len(MAGIC)
    try:
        while off < len(blob):
            (name_len,) = struct.unpack_from("<Q", blob, off)
            off += 8
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<Q", blob, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = 1
            for d in dims:
                count *= d
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return out
