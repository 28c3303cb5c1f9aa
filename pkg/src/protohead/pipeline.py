"""End-to-end detection over a feature map and external proposals.

Each proposal is scored for its top pre-selected classes and refined per
class through region propagation; candidates below the score threshold are
dropped, survivors pass through class-agnostic NMS and a small-box filter.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .classifier_head import (
    ClsNetWeights,
    classify,
    preselect_classes,
    prototype_projection,
    rearrange,
)
from .errors import DegenerateBoxError, FormatError, ValidationError
from .feature_io import BBox, FeatureMap, PrototypeBank, RegionFeatures, roi_align
from .localizer_head import (
    IntegralParams,
    LocNetWeights,
    Propagator,
    _normalize_cells,
    localize,
)


@dataclass(frozen=True)
class Detection:
    """One output box with its class and score."""

    box: BBox
    class_id: int
    class_name: str
    score: float
    proposal_index: int = -1

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 < self.score <= 1.0):
            raise ValidationError(f"detection score must lie in (0, 1], got {self.score}")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the detection pipeline; defaults follow the shipped setup."""

    k: int = 10                 # class pre-selection width
    t: int = 128                # rearranged channel width
    grid: int = 16              # ROI / heatmap grid size
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    min_box_area: float = 100.0
    normalize: bool = True      # L2-normalize region feature cells
    class_agnostic_nms: bool = True
    seed: int = 0
    workers: int = 1
    bank_path: str | None = None
    cls_weights_path: str | None = None
    loc_weights_path: str | None = None

    def __post_init__(self):
        if self.k < 1 or self.t < 1 or self.grid < 1:
            raise ValidationError("k, t, and grid must all be >= 1")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValidationError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.min_box_area < 0:
            raise ValidationError(f"min_box_area must be >= 0, got {self.min_box_area}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError(f"score_threshold must lie in [0, 1], got {self.score_threshold}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")


def nms_class_agnostic(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy NMS ignoring class labels; ties are broken by input order."""
    if not 0.0 < iou_thr < 1.0:
        raise ValidationError(f"iou threshold must lie in (0, 1), got {iou_thr}")
    if not dets:
        return []
    corners = np.array([d.box.corners for d in dets])
    areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")  # ties keep input order
    alive = np.ones(len(dets), dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        alive[i] = False
        iw = np.minimum(corners[i, 2], corners[:, 2]) - np.maximum(corners[i, 0], corners[:, 0])
        ih = np.minimum(corners[i, 3], corners[:, 3]) - np.maximum(corners[i, 1], corners[:, 1])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        iou = inter / (areas[i] + areas - inter)
        alive &= iou <= iou_thr
    return [dets[i] for i in kept]


def nms_per_class(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """NMS applied independently within each class, merged score-descending."""
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    merged: list[Detection] = []
    for cid in sorted(by_class):
        merged.extend(nms_class_agnostic(by_class[cid], iou_thr))
    return sorted(merged, key=lambda d: -d.score)


def filter_small(dets: list[Detection], min_area: float) -> list[Detection]:
    """Drop detections whose box area falls below min_area; order preserved."""
    if min_area < 0:
        raise ValidationError(f"min_area must be >= 0, got {min_area}")
    return [d for d in dets if d.box.area >= min_area]


def detect(
    fm: FeatureMap,
    proposals: list[BBox],
    bank: PrototypeBank,
    config: PipelineConfig,
    cls_weights: ClsNetWeights,
    loc_weights: Propagator,
    integral_params: IntegralParams | None = None,
    stats: dict | None = None,
) -> list[Detection]:
    """Run the full pipeline and return detections sorted by score.

    Exactly len(proposals) * min(k, C) (proposal, class) candidates are
    scored.  An optional stats dict collects the candidate accounting.
    """
    if not proposals:
        raise ValidationError("proposal list is empty")
    if bank.dim != fm.dim:
        raise ValidationError(
            f"bank dimension {bank.dim} does not match feature dimension {fm.dim}"
        )
    if cls_weights.in_channels != 1 + config.t + bank.num_backgrounds:
        raise ValidationError(
            f"classification net expects {cls_weights.in_channels} channels but the "
            f"configuration yields {1 + config.t + bank.num_backgrounds} (1 + t + B)"
        )
    if isinstance(loc_weights, LocNetWeights) and loc_weights.in_channels != 2 + bank.num_backgrounds:
        raise ValidationError(
            f"localization net expects {loc_weights.in_channels} channels but the bank "
            f"yields {2 + bank.num_backgrounds} (2 + B)"
        )
    params = integral_params if integral_params is not None else IntegralParams.uniform(config.grid)

    def work(item: tuple[int, BBox]) -> tuple[list[Detection], int]:
        index, proposal = item
        region = roi_align(fm, proposal, config.grid)
        if config.normalize:
            region = RegionFeatures(_normalize_cells(region.data))
        sim = prototype_projection(region, bank)
        found: list[Detection] = []
        scored = 0
        for cid in preselect_classes(region, bank, config.k):
            score = classify(rearrange(sim, cid, config.t), cls_weights)
            scored += 1
            if score < config.score_threshold:
                continue
            try:
                refined = localize(
                    proposal, fm, bank, cid, loc_weights, params, config.grid, config.normalize
                )
            except DegenerateBoxError:
                continue  # heatmap predicts no extent: nothing to report
            found.append(Detection(refined, cid, bank.class_names[cid], score, index))
        return found, scored

    items = list(enumerate(proposals))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]

    candidates: list[Detection] = []
    scored_total = 0
    for found, scored in results:
        candidates.extend(found)
        scored_total += scored

    candidates.sort(key=lambda d: -d.score)
    nms = nms_class_agnostic if config.class_agnostic_nms else nms_per_class
    survivors = filter_small(nms(candidates, config.nms_iou), config.min_box_area)
    if stats is not None:
        stats.update(
            proposals=len(proposals),
            candidates_scored=scored_total,
            above_threshold=len(candidates),
            kept=len(survivors),
        )
    return survivors


# ---------------------------------------------------------------------------
# Proposal and detection files.  Proposals are whitespace columns
# "x0 y0 x1 y1 [objectness]"; detections are one JSON record per line.
# ---------------------------------------------------------------------------


def load_proposals(path) -> list[BBox]:
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise FormatError(f"{path}:{ln}: expected 'x0 y0 x1 y1 [objectness]'")
            try:
                x0, y0, x1, y1 = (float(v) for v in parts[:4])
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: non-numeric coordinate") from exc
            boxes.append(BBox.from_corners(x0, y0, x1, y1))
    if not boxes:
        raise ValidationError(f"{path}: no proposals found")
    return boxes


def save_detections(dets: list[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            x0, y0, x1, y1 = d.box.corners
            fh.write(
                json.dumps(
                    {
                        "proposal": d.proposal_index,
                        "class_id": d.class_id,
                        "class": d.class_name,
                        "score": round(d.score, 9),
                        "box": [round(v, 4) for v in (x0, y0, x1, y1)],
                    }
                )
                + "\n"
            )


def load_detections(path) -> list[Detection]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                Detection(
                    BBox.from_corners(*obj["box"]),
                    int(obj["class_id"]),
                    str(obj["class"]),
                    float(obj["score"]),
                    int(obj.get("proposal", -1)),
                )
            )
    return out
