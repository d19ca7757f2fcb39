"""Read a ViT checkpoint (PyTorch state dict), remap tensor names, and write
an NSTA archive plus a JSON conversion report.

The NSTA layout (little-endian, no padding):
  magic "NSTA" | u32 version=1 | u32 metadata length | metadata (UTF-8 JSON)
  | u32 tensor count | per tensor: u32 name length, name, u8 dtype (1 =
  float32), u8 rank, rank x u64 dims, raw float32 payload.

Name maps ship as versioned JSON data files, one per checkpoint flavor, so a
new flavor is a new data file rather than a code change. Architecture metadata
(embed_dim, depth, mlp_ratio, pretrain_grid) is inferred from tensor shapes;
num_heads is not recoverable from shapes and comes from the name map.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

MAGIC = b"NSTA"
VERSION = 1
DTYPE_FLOAT32 = 1
PATCH_SIZE = 14

FLAVORS = ("vit_small", "vit_base", "vit_large", "vit_giant")


class ConvertError(Exception):
    pass


class MissingSourceTensor(ConvertError):
    pass


class ShapeMismatch(ConvertError):
    pass


class WriteFailure(ConvertError):
    pass


@dataclass(frozen=True)
class MapEntry:
    source: str
    target: str
    shape: tuple[int, ...]  # expected shape in the source checkpoint
    optional: bool = False


@dataclass(frozen=True)
class NameMap:
    flavor: str
    version: int
    num_heads: int
    entries: tuple[MapEntry, ...]

    def __post_init__(self):
        targets = [e.target for e in self.entries]
        if len(targets) != len(set(targets)):
            raise ShapeMismatch("duplicate target names in name map")


def load_name_map(name_or_path: str | Path) -> NameMap:
    """Load a name map by flavor name (bundled data file) or explicit path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        doc = json.loads(path.read_text())
    else:
        ref = resources.files("nsta_convert").joinpath(f"name_maps/{name_or_path}.json")
        if not ref.is_file():
            raise ConvertError(
                f"unknown flavor {name_or_path!r}; bundled: {', '.join(FLAVORS)}"
            )
        doc = json.loads(ref.read_text())
    entries = tuple(
        MapEntry(e["source"], e["target"], tuple(e["shape"]), e.get("optional", False))
        for e in doc["entries"]
    )
    return NameMap(doc["flavor"], doc["version"], doc["num_heads"], entries)


def load_state_dict(checkpoint_path: str | Path) -> dict[str, torch.Tensor]:
    """Load a checkpoint and unwrap the common nesting/prefix conventions."""
    obj = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    for key in ("model", "state_dict", "teacher"):
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            obj = obj[key]
    state = {}
    for name, value in obj.items():
        if not isinstance(value, torch.Tensor):
            continue
        if name.startswith("backbone."):
            name = name[len("backbone."):]
        state[name] = value
    return state


def _to_archive_tensor(target: str, value: np.ndarray) -> np.ndarray:
    """Reshape source-layout tensors into the archive layout."""
    if target == "cls_token":
        return value.reshape(-1)  # (1, 1, D) -> (D,)
    if target == "pos_embed":
        return value.reshape(value.shape[-2], value.shape[-1])  # drop batch dim
    if target == "patch_embed.weight":
        return value.reshape(value.shape[0], -1)  # (D, 3, p, p) -> (D, 3p^2)
    return value


def infer_config(tensors: dict[str, np.ndarray], num_heads: int) -> dict:
    """Derive the architecture block for the archive metadata from shapes."""
    d = tensors["patch_embed.weight"].shape[0]
    depth = 1 + max(
        int(name.split(".")[1]) for name in tensors if name.startswith("blocks.")
    )
    hidden = tensors["blocks.0.mlp.fc1.weight"].shape[0]
    grid = math.isqrt(tensors["pos_embed"].shape[0] - 1)
    if grid * grid != tensors["pos_embed"].shape[0] - 1:
        raise ShapeMismatch(
            f"pos_embed rows {tensors['pos_embed'].shape[0]} is not 1 + a square"
        )
    return {
        "image_size": grid * PATCH_SIZE,
        "patch_size": PATCH_SIZE,
        "embed_dim": int(d),
        "depth": int(depth),
        "num_heads": int(num_heads),
        "mlp_ratio": hidden / d,
        "pretrain_grid": int(grid),
    }


def save_archive(metadata: dict, tensors: dict[str, np.ndarray]) -> bytes:
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


def convert_checkpoint(
    checkpoint_path: str | Path,
    name_map: NameMap,
    out_path: str | Path,
) -> dict:
    """Convert one checkpoint to an NSTA archive; returns the report dict.

    Tensors are written in name-map order, float32, payload bytes identical
    to the source values; converting twice yields byte-identical files.
    """
    state = load_state_dict(checkpoint_path)
    converted: dict[str, np.ndarray] = {}
    report_rows = []
    for entry in name_map.entries:
        if entry.source not in state:
            if entry.optional:
                continue
            raise MissingSourceTensor(entry.source)
        value = state[entry.source].detach().to(torch.float32).numpy()
        if value.shape != entry.shape:
            raise ShapeMismatch(
                f"{entry.source}: expected {entry.shape}, got {value.shape}"
            )
        arr = np.ascontiguousarray(_to_archive_tensor(entry.target, value), dtype="<f4")
        converted[entry.target] = arr
        report_rows.append(
            {
                "source": entry.source,
                "target": entry.target,
                "shape": list(arr.shape),
                "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
            }
        )

    metadata = infer_config(converted, name_map.num_heads)
    blob = save_archive(metadata, converted)
    out_path = Path(out_path)
    try:
        out_path.write_bytes(blob)
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc
    report = {
        "flavor": name_map.flavor,
        "name_map_version": name_map.version,
        "archive": str(out_path),
        "archive_sha256": hashlib.sha256(blob).hexdigest(),
        "config": metadata,
        "tensors": report_rows,
    }
    report_path = out_path.with_suffix(out_path.suffix + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
