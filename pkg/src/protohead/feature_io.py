"""Geometric/tensor core types, binary file formats, and ROIAlign.

Two little-endian binary containers are defined here.

``PHF1`` feature maps::

    b"PHF1" | u32: H, W, D, image_width_px, image_height_px, patch_stride_px
    | H*W*D float32, row-major (H, then W, then D)

``PHB1`` prototype banks::

    b"PHB1" | u32: C, B, D | C null-terminated UTF-8 class names
    | (C+B)*D float32 (class prototypes first, then background prototypes)
    | u8 normalized flag

Patch cell (r, c) of a feature map covers the pixel square
``[c*stride, (c+1)*stride) x [r*stride, (r+1)*stride)``; its feature vector
is treated as a point sample at the cell center for interpolation purposes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptFileError,
    EmptyRegionError,
    FormatError,
    ValidationError,
)

PHF_MAGIC = b"PHF1"
PHB_MAGIC = b"PHB1"

_UNIT_NORM_TOL = 1e-5


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, stored as center plus extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        try:
            vals = tuple(float(v) for v in (self.cx, self.cy, self.w, self.h))
        except (TypeError, ValueError):
            raise ValidationError(
                f"box fields must be numbers, got {(self.cx, self.cy, self.w, self.h)!r}"
            ) from None
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box fields must be finite, got {vals}")
        if vals[2] <= 0 or vals[3] <= 0:
            raise ValidationError(f"box extents must be positive, got w={vals[2]} h={vals[3]}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, v)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) with x0 <= x1 and y0 <= y1."""
        hw, hh = 0.5 * self.w, 0.5 * self.h
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def iou(self, other: "BBox") -> float:
        ax0, ay0, ax1, ay1 = self.corners
        bx0, by0, bx1, by1 = other.corners
        iw = min(ax1, bx1) - max(ax0, bx0)
        ih = min(ay1, by1) - max(ay0, by0)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        return inter / (self.area + other.area - inter)

    def clip(self, image_width_px: float, image_height_px: float) -> "BBox":
        """Intersect with the image rectangle [0, w] x [0, h].

        Raises EmptyRegionError when the intersection has no positive area.
        """
        x0, y0, x1, y1 = self.corners
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, float(image_width_px)), min(y1, float(image_height_px))
        if x1 <= x0 or y1 <= y0:
            raise EmptyRegionError(
                f"box {self.corners} lies outside the {image_width_px}x{image_height_px} image"
            )
        return BBox.from_corners(x0, y0, x1, y1)


@dataclass(frozen=True)
class FeatureMap:
    """H x W x D grid of backbone patch features plus image geometry."""

    data: np.ndarray
    image_width_px: int
    image_height_px: int
    patch_stride_px: int

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"feature data must be non-empty H x W x D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature data contains non-finite values")
        if self.patch_stride_px <= 0:
            raise ValidationError(f"patch stride must be positive, got {self.patch_stride_px}")
        if self.image_width_px < data.shape[1] or self.image_height_px < data.shape[0]:
            raise ValidationError(
                f"image {self.image_width_px}x{self.image_height_px} px cannot hold a "
                f"{data.shape[1]}x{data.shape[0]} patch grid"
            )
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height_patches(self) -> int:
        return self.data.shape[0]

    @property
    def width_patches(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RegionFeatures:
    """S x S x D features sampled from a feature map over one region."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3 or data.shape[0] != data.shape[1] or min(data.shape) < 1:
            raise ValidationError(f"region features must be S x S x D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("region features contain non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PrototypeBank:
    """C class prototypes plus B class-agnostic background prototypes."""

    class_prototypes: np.ndarray
    class_names: tuple[str, ...]
    background_prototypes: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        cls = np.array(self.class_prototypes, dtype=np.float32, order="C")
        if cls.ndim != 2 or cls.shape[0] < 1 or cls.shape[1] < 1:
            raise ValidationError(f"class prototypes must be C x D with C >= 1, got {cls.shape}")
        bg = np.array(self.background_prototypes, dtype=np.float32, order="C")
        if bg.size == 0:
            bg = np.zeros((0, cls.shape[1]), dtype=np.float32)
        if bg.ndim != 2 or bg.shape[1] != cls.shape[1]:
            raise ValidationError(
                f"background prototypes must be B x {cls.shape[1]}, got {bg.shape}"
            )
        names = tuple(str(n) for n in self.class_names)
        if len(names) != cls.shape[0]:
            raise ValidationError(f"{cls.shape[0]} classes but {len(names)} names")
        stacked = np.concatenate([cls, bg], axis=0)
        if not np.all(np.isfinite(stacked)):
            raise ValidationError("prototypes contain non-finite values")
        if self.normalized:
            norms = np.linalg.norm(stacked.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
                raise ValidationError(
                    f"bank is flagged normalized but prototype norms deviate up to "
                    f"{np.abs(norms - 1.0).max():.2e}"
                )
        object.__setattr__(self, "class_prototypes", _freeze(cls))
        object.__setattr__(self, "background_prototypes", _freeze(bg))
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return self.class_prototypes.shape[0]

    @property
    def num_backgrounds(self) -> int:
        return self.background_prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.class_prototypes.shape[1]

    def matrix(self) -> np.ndarray:
        """All prototypes as a float64 (C+B) x D matrix, classes first."""
        return np.concatenate(
            [self.class_prototypes, self.background_prototypes], axis=0
        ).astype(np.float64)


def save_feature_map(fm: FeatureMap, path) -> None:
    """Write a feature map in the PHF1 format. Bytes are deterministic."""
    header = PHF_MAGIC + struct.pack(
        "<6I",
        fm.height_patches,
        fm.width_patches,
        fm.dim,
        fm.image_width_px,
        fm.image_height_px,
        fm.patch_stride_px,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fm.data.astype("<f4", copy=False).tobytes())


def load_feature_map(path) -> FeatureMap:
    """Read a PHF1 file; inverse of save_feature_map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PHF_MAGIC:
        raise FormatError(f"{path}: expected magic {PHF_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 28:
        raise CorruptFileError(f"{path}: truncated header ({len(blob)} bytes)")
    h, w, d, img_w, img_h, stride = struct.unpack_from("<6I", blob, 4)
    expected = 28 + 4 * h * w * d
    if len(blob) != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(blob) - 28} bytes, header implies {expected - 28}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=28).reshape(h, w, d) if h * w * d else np.zeros((h, w, d))
    return FeatureMap(data, img_w, img_h, stride)


def save_prototype_bank(bank: PrototypeBank, path) -> None:
    """Write a prototype bank in the PHB1 format."""
    parts = [
        PHB_MAGIC,
        struct.pack("<3I", bank.num_classes, bank.num_backgrounds, bank.dim),
    ]
    for name in bank.class_names:
        raw = name.encode("utf-8")
        if b"\x00" in raw:
            raise ValidationError(f"class name {name!r} contains a NUL byte")
        parts.append(raw + b"\x00")
    parts.append(bank.class_prototypes.astype("<f4", copy=False).tobytes())
    parts.append(bank.background_prototypes.astype("<f4", copy=False).tobytes())
    parts.append(struct.pack("<B", 1 if bank.normalized else 0))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_prototype_bank(path) -> PrototypeBank:
    """Read a PHB1 file; inverse of save_prototype_bank."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PHB_MAGIC:
        raise FormatError(f"{path}: expected magic {PHB_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 16:
        raise CorruptFileError(f"{path}: truncated header ({len(blob)} bytes)")
    c, b, d = struct.unpack_from("<3I", blob, 4)
    pos = 16
    names = []
    for _ in range(c):
        end = blob.find(b"\x00", pos)
        if end < 0:
            raise CorruptFileError(f"{path}: unterminated class name table")
        names.append(blob[pos:end].decode("utf-8"))
        pos = end + 1
    need = 4 * (c + b) * d + 1
    if len(blob) - pos != need:
        raise CorruptFileError(
            f"{path}: payload is {len(blob) - pos} bytes after names, expected {need}"
        )
    vals = np.frombuffer(blob, dtype="<f4", count=(c + b) * d, offset=pos).reshape(c + b, d)
    flag = blob[-1]
    if flag not in (0, 1):
        raise CorruptFileError(f"{path}: normalized flag must be 0 or 1, got {flag}")
    return PrototypeBank(vals[:c], tuple(names), vals[c:], normalized=bool(flag))


def roi_align(fm: FeatureMap, box: BBox, grid: int = 16) -> RegionFeatures:
    """Bilinearly sample a grid x grid region of features over a box.

    The box is clipped to image bounds first.  Each output cell takes one
    bilinear sample at the cell center of the clipped box mapped into patch
    coordinates; samples past the outermost patch centers clamp to the edge.

    Raises EmptyRegionError when the box lies entirely outside the image.
    """
    if grid < 1:
        raise ValidationError(f"grid size must be >= 1, got {grid}")
    clipped = box.clip(fm.image_width_px, fm.image_height_px)
    x0, y0, x1, y1 = clipped.corners
    s = float(fm.patch_stride_px)
    xs = x0 + (np.arange(grid) + 0.5) * (x1 - x0) / grid
    ys = y0 + (np.arange(grid) + 0.5) * (y1 - y0) / grid
    u = np.clip(xs / s - 0.5, 0.0, fm.width_patches - 1.0)
    v = np.clip(ys / s - 0.5, 0.0, fm.height_patches - 1.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    u1 = np.minimum(u0 + 1, fm.width_patches - 1)
    v1 = np.minimum(v0 + 1, fm.height_patches - 1)
    fu = (u - u0)[None, :, None]
    fv = (v - v0)[:, None, None]
    d = fm.data.astype(np.float64)
    top = (1.0 - fu) * d[np.ix_(v0, u0)] + fu * d[np.ix_(v0, u1)]
    bot = (1.0 - fu) * d[np.ix_(v1, u0)] + fu * d[np.ix_(v1, u1)]
    return RegionFeatures((1.0 - fv) * top + fv * bot)
