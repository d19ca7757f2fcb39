"""Centered window extraction, mid-axial slices, channel replication, resizing,
and labeled patch assembly from LUNA16 candidates."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .ct_io import Candidate, CtVolume, NoduleAnnotation, normalize_hu, world_to_voxel
from .errors import (
    NonAxisAlignedVolume,
    OutOfBounds,
    WindowLargerThanVolume,
)

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 64
DEFAULT_IMAGE_SIZE = 504


@dataclass(frozen=True)
class PatchSample:
    """A labeled, channel-replicated 2D image ready for the encoder."""

    scan_id: str
    center_voxel: tuple[int, int, int]
    window: int
    image: np.ndarray  # (3, H, W), values in [0, 1]
    label: int
    bbox_target: tuple[float, float, float, float] | None  # (cx, cy, bw, bh)
    clamped: bool = False

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise OutOfBounds(f"image must be (3, H, W), got {self.image.shape}")
        if (self.bbox_target is not None) != (self.label == 1):
            raise OutOfBounds("bbox_target present iff label == 1")
        self.image.setflags(write=False)


def voxel_at(volume: CtVolume, x: int, y: int, z: int):
    """Value stored at integer voxel index (x, y, z)."""
    nx, ny, nz = volume.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise OutOfBounds(f"({x}, {y}, {z}) outside dims {volume.dims}")
    return volume.voxels[z, y, x]


def _window_start(center: int, w: int, n: int) -> tuple[int, bool]:
    """Start index of a centered length-w range on an axis of size n,
    shifted inward when it would cross a border."""
    start = center - w // 2
    clamped = False
    if start < 0:
        start, clamped = 0, True
    elif start + w > n:
        start, clamped = n - w, True
    return start, clamped


def extract_window(volume: CtVolume, center, w: int):
    """w x w x w subvolume centered at an integer voxel, clamped at borders.

    Returns (window, clamped); window[k, j, i] = voxel(x0+i, y0+j, z0+k).
    """
    if w < 1:
        raise WindowLargerThanVolume(f"window must be >= 1, got {w}")
    nx, ny, nz = volume.dims
    if w > min(nx, ny, nz):
        raise WindowLargerThanVolume(f"window {w} exceeds volume dims {volume.dims}")
    if np.max(np.abs(np.abs(volume.direction) - np.eye(3))) > 1e-6:
        raise NonAxisAlignedVolume("window extraction requires axis-aligned direction")
    xc, yc, zc = (int(c) for c in center)
    x0, cx = _window_start(xc, w, nx)
    y0, cy = _window_start(yc, w, ny)
    z0, cz = _window_start(zc, w, nz)
    window = volume.voxels[z0:z0 + w, y0:y0 + w, x0:x0 + w]
    return window, (cx or cy or cz)


def extract_mid_slice(volume: CtVolume, center, w: int):
    """The z = z_c plane of the centered window, as a (w, w) image (rows = y).

    Returns (image, clamped)."""
    window, clamped = extract_window(volume, center, w)
    zc = int(center[2])
    z0, _ = _window_start(zc, w, volume.dims[2])
    return window[zc - z0], clamped


def replicate_channels(image2d: np.ndarray) -> np.ndarray:
    """Stack a 2D image into 3 identical channels."""
    img = np.asarray(image2d)
    return np.repeat(img[np.newaxis], 3, axis=0)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel (align_corners=False) convention.

    Source coordinate for output pixel i is (i + 0.5) * scale - 0.5, clamped
    to the valid range. Works on (H, W) or (..., H, W) arrays.
    """
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[-2], img.shape[-1]
    if in_h == out_h and in_w == out_w:
        return img.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    top = img[..., y0, :][..., :, x0] * (1 - fx) + img[..., y0, :][..., :, x1] * fx
    bot = img[..., y1, :][..., :, x0] * (1 - fx) + img[..., y1, :][..., :, x1] * fx
    return top * (1 - fy[:, np.newaxis]) + bot * fy[:, np.newaxis]


@dataclass
class BuildStats:
    produced: int = 0
    skipped: int = 0


def build_samples(
    volume: CtVolume,
    candidates: list[Candidate],
    annotations: list[NoduleAnnotation],
    w: int = DEFAULT_WINDOW,
    hu_window: tuple[float, float] = (-1000.0, 400.0),
    image_size: int = DEFAULT_IMAGE_SIZE,
    stats: BuildStats | None = None,
) -> list[PatchSample]:
    """Turn a volume's candidates into encoder-ready PatchSamples.

    Per candidate: world -> voxel, round, mid-axial slice of a w-window,
    HU-normalize, resize to image_size, replicate channels. Positives get a
    centered bbox target sized from the matching annotation's diameter.
    """
    samples = []
    for cand in candidates:
        fv = world_to_voxel(volume, cand.world_center)
        center = tuple(int(round(c)) for c in fv)
        nx, ny, nz = volume.dims
        if not (0 <= center[0] < nx and 0 <= center[1] < ny and 0 <= center[2] < nz):
            log.warning("skipping %s candidate at %s: outside volume", cand.scan_id, fv)
            if stats is not None:
                stats.skipped += 1
            continue
        slice2d, clamped = extract_mid_slice(volume, center, w)
        norm = normalize_hu(slice2d, *hu_window)
        resized = resize_bilinear(norm, image_size, image_size)
        image = replicate_channels(resized).astype(np.float32)

        bbox = None
        if cand.label == 1:
            diameter = _matching_diameter(cand, annotations)
            # diameter in mm -> in-plane pixels at native spacing -> fraction
            # of the w-voxel patch; resizing rescales x and y together so the
            # normalized size is unchanged.
            bw = (diameter / volume.spacing[0]) / w
            bh = (diameter / volume.spacing[1]) / w
            bbox = (0.5, 0.5, min(bw, 1.0), min(bh, 1.0))
        samples.append(
            PatchSample(cand.scan_id, center, w, image, cand.label, bbox, clamped)
        )
        if stats is not None:
            stats.produced += 1
    return samples


def _matching_diameter(cand: Candidate, annotations: list[NoduleAnnotation]) -> float:
    """Diameter of the nearest same-scan annotation, defaulting to one window
    quarter's worth if no annotation exists for a positive candidate."""
    best_d, best_diam = None, None
    c = np.asarray(cand.world_center)
    for ann in annotations:
        if ann.scan_id != cand.scan_id:
            continue
        d = float(np.linalg.norm(np.asarray(ann.world_center) - c))
        if best_d is None or d < best_d:
            best_d, best_diam = d, ann.diameter
    if best_diam is None:
        raise OutOfBounds(f"positive candidate in {cand.scan_id} has no annotation")
    return best_diam


def sample_negatives(
    candidates: list[Candidate],
    annotations: list[NoduleAnnotation],
    ratio: float = 1.0,
    seed: int = 0,
) -> tuple[list[Candidate], bool]:
    """Pick ceil(ratio * #positives) negatives uniformly at random, excluding
    any negative within one annotated diameter of a same-scan nodule center.

    Returns (selected, exhausted) where exhausted flags that fewer eligible
    negatives existed than requested.
    """
    if ratio <= 0:
        raise OutOfBounds(f"ratio must be > 0, got {ratio}")
    positives = [c for c in candidates if c.label == 1]
    by_scan: dict[str, list[NoduleAnnotation]] = {}
    for ann in annotations:
        by_scan.setdefault(ann.scan_id, []).append(ann)

    eligible = []
    for cand in candidates:
        if cand.label != 0:
            continue
        near = False
        for ann in by_scan.get(cand.scan_id, ()):
            d = np.linalg.norm(
                np.asarray(cand.world_center) - np.asarray(ann.world_center)
            )
            if d <= ann.diameter:
                near = True
                break
        if not near:
            eligible.append(cand)

    n_want = int(np.ceil(ratio * len(positives)))
    rng = np.random.default_rng(seed)
    if n_want >= len(eligible):
        if n_want > len(eligible):
            log.warning(
                "requested %d negatives but only %d eligible", n_want, len(eligible)
            )
        return list(eligible), n_want > len(eligible)
    chosen = rng.choice(len(eligible), size=n_want, replace=False)
    return [eligible[i] for i in sorted(chosen)], False


# --- patch set persistence: float32 LE binary + CSV manifest ---

MANIFEST_COLUMNS = [
    "scan_id", "xc", "yc", "zc", "w", "label", "cx", "cy", "bw", "bh", "clamped_flag",
]


def save_patch_set(samples: list[PatchSample], bin_path, manifest_path) -> None:
    """Write images as a float32 LE (n, 3, H, W) blob plus a CSV manifest."""
    from pathlib import Path

    images = np.stack([s.image for s in samples]).astype("<f4")
    Path(bin_path).write_bytes(images.tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for s in samples:
        bbox = s.bbox_target if s.bbox_target is not None else ("", "", "", "")
        writer.writerow(
            [s.scan_id, *s.center_voxel, s.window, s.label, *bbox, int(s.clamped)]
        )
    Path(manifest_path).write_text(buf.getvalue())


def load_patch_set(bin_path, manifest_path, image_size: int) -> list[PatchSample]:
    from pathlib import Path

    rows = list(csv.reader(io.StringIO(Path(manifest_path).read_text())))
    if not rows or rows[0] != MANIFEST_COLUMNS:
        raise OutOfBounds(f"bad manifest header in {manifest_path}")
    rows = rows[1:]
    data = np.frombuffer(Path(bin_path).read_bytes(), dtype="<f4")
    images = data.reshape(len(rows), 3, image_size, image_size)
    samples = []
    for row, image in zip(rows, images):
        label = int(row[5])
        bbox = tuple(float(v) for v in row[6:10]) if label == 1 else None
        samples.append(
            PatchSample(
                row[0],
                (int(row[1]), int(row[2]), int(row[3])),
                int(row[4]),
                image,
                label,
                bbox,
                bool(int(row[10])),
            )
        )
    return samples
