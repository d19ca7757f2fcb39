"""CT volume I/O: MetaImage parsing, LUNA16 CSVs, geometry, HU windowing, splits.

Volumes are stored z-slowest / x-fastest: the voxel array has shape
(nz, ny, nx) so a C-contiguous flatten matches the MetaImage raw layout.
Annotation coordinates are world millimeters (LUNA16 convention).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadDimensionality,
    DegenerateWindow,
    EmptyInput,
    MalformedRow,
    MissingRequiredKey,
    PayloadSizeMismatch,
    UnknownHeader,
    UnsupportedElementType,
)

_REQUIRED_KEYS = ("ObjectType", "NDims", "DimSize", "ElementType", "ElementDataFile")

_ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}


@dataclass(frozen=True)
class CtVolume:
    """A 3D voxel grid in Hounsfield units with physical geometry."""

    dims: tuple[int, int, int]          # (nx, ny, nz)
    spacing: tuple[float, float, float]  # mm per voxel
    origin: tuple[float, float, float]   # mm
    direction: np.ndarray                # 3x3, row-major, orthonormal
    voxels: np.ndarray                   # shape (nz, ny, nx)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 1:
            raise BadDimensionality(f"dims must be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise BadDimensionality(f"spacing must be > 0, got {self.spacing}")
        if self.voxels.shape != (nz, ny, nx):
            raise BadDimensionality(
                f"voxel array shape {self.voxels.shape} != (nz, ny, nx) = {(nz, ny, nx)}"
            )
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3, 3) or np.max(np.abs(d.T @ d - np.eye(3))) > 1e-6:
            raise BadDimensionality("direction must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "direction", d)
        self.voxels.setflags(write=False)

    def voxel(self, x: int, y: int, z: int):
        return self.voxels[z, y, x]


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    world_center: tuple[float, float, float]
    diameter: float

    def __post_init__(self):
        if self.diameter <= 0:
            raise MalformedRow(f"diameter must be > 0, got {self.diameter}")


@dataclass(frozen=True)
class Candidate:
    scan_id: str
    world_center: tuple[float, float, float]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise MalformedRow(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "train": list(self.train_ids),
                "val": list(self.val_ids),
                "test": list(self.test_ids),
                "seed": self.seed,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        doc = json.loads(text)
        return cls(
            tuple(doc["train"]), tuple(doc["val"]), tuple(doc["test"]), int(doc["seed"])
        )


def _parse_header(header_bytes: bytes) -> dict[str, str]:
    fields = {}
    for line in header_bytes.decode("ascii", errors="replace").splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def parse_metaimage(header_bytes: bytes, raw_bytes: bytes) -> CtVolume:
    """Parse a MetaImage .mhd header plus its .raw payload into a CtVolume."""
    fields = _parse_header(header_bytes)
    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise MissingRequiredKey(key)
    if "ElementSpacing" not in fields and "ElementSize" not in fields:
        raise MissingRequiredKey("ElementSpacing")
    if "Offset" not in fields and "Position" not in fields:
        raise MissingRequiredKey("Offset")

    if int(fields["NDims"]) != 3:
        raise BadDimensionality(f"NDims must be 3, got {fields['NDims']}")

    elem_type = fields["ElementType"]
    if elem_type not in _ELEMENT_DTYPES:
        raise UnsupportedElementType(elem_type)
    dtype = _ELEMENT_DTYPES[elem_type]

    nx, ny, nz = (int(v) for v in fields["DimSize"].split())
    spacing = tuple(
        float(v) for v in fields.get("ElementSpacing", fields.get("ElementSize")).split()
    )
    origin = tuple(float(v) for v in fields.get("Offset", fields.get("Position")).split())
    if fields.get("TransformMatrix"):
        direction = np.array(
            [float(v) for v in fields["TransformMatrix"].split()], dtype=np.float64
        ).reshape(3, 3)
    else:
        direction = np.eye(3)

    expected = nx * ny * nz * dtype.itemsize
    if len(raw_bytes) != expected:
        raise PayloadSizeMismatch(
            f"raw payload is {len(raw_bytes)} bytes, expected {expected}"
        )
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    voxels = np.frombuffer(raw_bytes, dtype=dtype).reshape(nz, ny, nx)
    return CtVolume((nx, ny, nz), spacing, origin, direction, voxels)


def serialize_metaimage(volume: CtVolume, raw_filename: str) -> tuple[bytes, bytes]:
    """Inverse of parse_metaimage: returns (header bytes, raw payload bytes)."""
    if volume.voxels.dtype == np.int16:
        elem_type = "MET_SHORT"
    elif volume.voxels.dtype == np.float32:
        elem_type = "MET_FLOAT"
    else:
        raise UnsupportedElementType(str(volume.voxels.dtype))
    nx, ny, nz = volume.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "TransformMatrix = " + " ".join(_fmt(v) for v in volume.direction.ravel()),
        "Offset = " + " ".join(_fmt(v) for v in volume.origin),
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = " + " ".join(_fmt(v) for v in volume.spacing),
        f"ElementType = {elem_type}",
        f"ElementDataFile = {raw_filename}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    raw = np.ascontiguousarray(volume.voxels).astype(volume.voxels.dtype.newbyteorder("<")).tobytes()
    return header, raw


def _fmt(v: float) -> str:
    return repr(float(v))


def read_metaimage_file(mhd_path) -> CtVolume:
    """Read a .mhd header from disk plus the .raw file it references."""
    from pathlib import Path

    mhd_path = Path(mhd_path)
    header_bytes = mhd_path.read_bytes()
    fields = _parse_header(header_bytes)
    data_file = fields.get("ElementDataFile")
    if data_file is None:
        raise MissingRequiredKey("ElementDataFile")
    raw_bytes = (mhd_path.parent / data_file).read_bytes()
    return parse_metaimage(header_bytes, raw_bytes)


def write_metaimage_file(volume: CtVolume, mhd_path) -> None:
    from pathlib import Path

    mhd_path = Path(mhd_path)
    raw_name = mhd_path.stem + ".raw"
    header, raw = serialize_metaimage(volume, raw_name)
    mhd_path.write_bytes(header)
    (mhd_path.parent / raw_name).write_bytes(raw)


# --- geometry ---

def world_to_voxel(volume: CtVolume, point_mm) -> np.ndarray:
    """Continuous voxel coordinate (fx, fy, fz) of a world-mm point."""
    p = np.asarray(point_mm, dtype=np.float64) - np.asarray(volume.origin)
    return (volume.direction.T @ p) / np.asarray(volume.spacing)


def voxel_to_world(volume: CtVolume, voxel_coord) -> np.ndarray:
    """World-mm position of a (possibly fractional) voxel coordinate."""
    v = np.asarray(voxel_coord, dtype=np.float64) * np.asarray(volume.spacing)
    return volume.direction @ v + np.asarray(volume.origin)


# --- intensity ---

def normalize_hu(values, lo_hu: float, hi_hu: float) -> np.ndarray:
    """Clip to [lo_hu, hi_hu] and rescale linearly to [0, 1]."""
    if lo_hu >= hi_hu:
        raise DegenerateWindow(f"need lo < hi, got [{lo_hu}, {hi_hu}]")
    arr = values.voxels if isinstance(values, CtVolume) else np.asarray(values)
    return (np.clip(arr.astype(np.float64), lo_hu, hi_hu) - lo_hu) / (hi_hu - lo_hu)


# --- LUNA16 CSVs ---

_ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]
_CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "class"]


def _read_rows(csv_text: str, expected_header: list[str]):
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise UnknownHeader("empty CSV") from None
    if [h.strip() for h in header] != expected_header:
        raise UnknownHeader(f"expected header {expected_header}, got {header}")
    for i, row in enumerate(reader):
        if not row:
            continue
        if len(row) != len(expected_header):
            raise MalformedRow(f"row {i + 2}: expected {len(expected_header)} columns")
        yield i + 2, row


def load_annotations(csv_text: str) -> list[NoduleAnnotation]:
    out = []
    for lineno, row in _read_rows(csv_text, _ANNOTATION_HEADER):
        try:
            center = (float(row[1]), float(row[2]), float(row[3]))
            diameter = float(row[4])
        except ValueError as exc:
            raise MalformedRow(f"row {lineno}: {exc}") from None
        out.append(NoduleAnnotation(row[0], center, diameter))
    return out


def load_candidates(csv_text: str) -> list[Candidate]:
    out = []
    for lineno, row in _read_rows(csv_text, _CANDIDATE_HEADER):
        try:
            center = (float(row[1]), float(row[2]), float(row[3]))
            label = int(row[4])
        except ValueError as exc:
            raise MalformedRow(f"row {lineno}: {exc}") from None
        out.append(Candidate(row[0], center, label))
    return out


# --- dataset split ---

def split_dataset(scan_ids, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Scan-level train/val/test split; val and test get floor(ratio * N),
    the remainder goes to train."""
    ids = list(scan_ids)
    if not ids:
        raise EmptyInput("no scan ids")
    if len(set(ids)) != len(ids):
        raise MalformedRow("scan ids must be unique")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DegenerateWindow(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    n_train = n - n_val - n_test
    return DatasetSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train:n_train + n_val]),
        tuple(shuffled[n_train + n_val:]),
        seed,
    )
