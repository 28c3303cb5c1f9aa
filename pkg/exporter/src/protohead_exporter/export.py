"""Export per-patch feature maps and instance lists for the detection head.

Images are resized (bilinear) so both sides are the largest multiples of the
backbone patch stride not exceeding the original size; the resized geometry
is what the PHF1 header records.  Annotation boxes are scaled into that
geometry; annotation masks are rasterized onto the patch grid by sampling
the original-resolution mask at each patch-cell center.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from protohead import FeatureMap, save_feature_map
from protohead.errors import ProtoheadWarning, ValidationError
from protohead.prototype_builder import mask_to_rle

from .backbones import PatchBackbone, load_backbone


@dataclass(frozen=True)
class ExportJob:
    """One batch export: images, backbone choice, output directory."""

    image_paths: tuple
    backbone: str
    out_dir: Path
    annotations: Path | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_paths", tuple(Path(p) for p in self.image_paths))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.annotations is not None:
            object.__setattr__(self, "annotations", Path(self.annotations))
        missing = [str(p) for p in self.image_paths if not p.exists()]
        if missing:
            raise ValidationError(f"image paths do not exist: {missing}")


def _target_size(width: int, height: int, stride: int) -> tuple[int, int]:
    new_w = max(stride, (width // stride) * stride)
    new_h = max(stride, (height // stride) * stride)
    return new_w, new_h


def _decode(path: Path) -> Image.Image | None:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        warnings.warn(f"skipping undecodable image {path}: {exc}", ProtoheadWarning)
        return None


def _feature_path(out_dir: Path, image_path: Path) -> Path:
    return out_dir / (image_path.stem + ".phf1")


def export_features(job: ExportJob, backbone: PatchBackbone | None = None) -> list[Path]:
    """Encode every decodable image to a PHF1 file; returns written paths."""
    bb = backbone if backbone is not None else load_backbone(job.backbone, job.seed)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in job.image_paths:
        img = _decode(path)
        if img is None:
            continue
        new_w, new_h = _target_size(img.width, img.height, bb.patch_size)
        if (img.width, img.height) != (new_w, new_h):
            img = img.resize((new_w, new_h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        grid = bb.encode(arr)
        fm = FeatureMap(grid, new_w, new_h, bb.patch_size)
        out_path = _feature_path(job.out_dir, path)
        save_feature_map(fm, out_path)
        written.append(out_path)
    return written


def _rasterize_mask(mask: np.ndarray, orig_size, new_size, stride) -> np.ndarray:
    """Boolean patch-grid mask: a cell is set iff the original-resolution
    mask is set at the pixel under the cell center."""
    orig_w, orig_h = orig_size
    new_w, new_h = new_size
    rows, cols = new_h // stride, new_w // stride
    cy = ((np.arange(rows) + 0.5) * stride) * (orig_h / new_h)
    cx = ((np.arange(cols) + 0.5) * stride) * (orig_w / new_w)
    iy = np.clip(cy.astype(np.intp), 0, mask.shape[0] - 1)
    ix = np.clip(cx.astype(np.intp), 0, mask.shape[1] - 1)
    return mask[np.ix_(iy, ix)]


def export_instance_list(job: ExportJob, backbone: PatchBackbone | None = None) -> Path:
    """Write the instance-list file for annotated, already-exported images.

    The annotation file maps image file names to lists of instances, each
    carrying a class name and either a pixel box [x0, y0, x1, y1] or a
    full-resolution 0/1 mask (nested lists).  Records whose feature file is
    missing are skipped with a warning.
    """
    if job.annotations is None:
        raise ValidationError("export job has no annotation file")
    bb = backbone if backbone is not None else load_backbone(job.backbone, job.seed)
    try:
        annos = json.loads(job.annotations.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{job.annotations}: not valid JSON: {exc}") from exc
    by_name = {p.name: p for p in job.image_paths}
    lines = []
    for image_name, instances in annos.items():
        path = by_name.get(image_name)
        feature = _feature_path(job.out_dir, path) if path else None
        if path is None or not feature.exists():
            warnings.warn(
                f"annotation for {image_name!r} has no exported feature file; skipped",
                ProtoheadWarning,
            )
            continue
        with Image.open(path) as img:
            orig_w, orig_h = img.size
        new_w, new_h = _target_size(orig_w, orig_h, bb.patch_size)
        for inst in instances:
            record = {"feature": feature.name, "class": str(inst["class"])}
            if "box" in inst:
                x0, y0, x1, y1 = (float(v) for v in inst["box"])
                sx, sy = new_w / orig_w, new_h / orig_h
                record["box"] = [x0 * sx, y0 * sy, x1 * sx, y1 * sy]
            elif "mask" in inst:
                mask = np.asarray(inst["mask"], dtype=bool)
                if mask.shape != (orig_h, orig_w):
                    raise ValidationError(
                        f"mask for {image_name!r} has shape {mask.shape}, image is "
                        f"{orig_h}x{orig_w}"
                    )
                patch_mask = _rasterize_mask(mask, (orig_w, orig_h), (new_w, new_h),
                                             bb.patch_size)
                record["mask"] = mask_to_rle(patch_mask)
            else:
                raise ValidationError(f"instance for {image_name!r} has no box or mask")
            lines.append(json.dumps(record))
    out = job.out_dir / "instances.jsonl"
    out.write_text("\n".join(lines) + ("\n" if lines else ""))
    return out
