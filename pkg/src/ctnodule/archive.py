"""NSTA tensor archive: a tiny portable binary container for named float32
tensors plus a JSON metadata block.

Layout (little-endian, no padding):
  magic "NSTA" | u32 version=1 | u32 metadata length | metadata (UTF-8 JSON)
  | u32 tensor count | per tensor: u32 name length, name, u8 dtype (1 =
  float32), u8 rank, rank x u64 dims, raw float32 payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagic, ShapeMismatch, UnsupportedVersion

MAGIC = b"NSTA"
VERSION = 1
DTYPE_FLOAT32 = 1


def save_tensor_archive(metadata: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize a metadata dict plus named tensors to NSTA bytes."""
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_tensor_archive(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse NSTA bytes back into (metadata, name -> float32 array)."""
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    offset = 12
    metadata = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if dtype_code != DTYPE_FLOAT32:
            raise UnsupportedVersion(f"dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}Q", data, offset)
        offset += 8 * rank
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        payload = data[offset:offset + n_bytes]
        if len(payload) != n_bytes:
            raise ShapeMismatch(f"truncated payload for tensor {name!r}")
        offset += n_bytes
        if name in tensors:
            raise ShapeMismatch(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return metadata, tensors
