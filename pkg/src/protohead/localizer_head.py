"""Region-propagation localization.

A proposal is expanded around its center, encoded against the expansion as
a binary heatmap, propagated toward the object by a small segmentation-style
conv stack over similarity channels, and finally converted back to a box by
a spatial-integral layer: a softmax centroid for the center and
order-statistic-weighted row/column occupancy estimates for the extent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import (
    DegenerateBoxError,
    EmptyRegionError,
    ProtoheadWarning,
    ValidationError,
)
from .feature_io import BBox, FeatureMap, PrototypeBank, roi_align, _freeze
from .network import (
    BRANCH_LOC,
    conv2d,
    fan_in_uniform,
    read_weight_container,
    sigmoid,
    softmax,
    write_weight_container,
)

EXPANSION_RATIO = 0.4


@dataclass(frozen=True)
class Heatmap:
    """S x S map: a binary initial mask or propagated logits."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 2 or data.shape[0] != data.shape[1] or data.shape[0] < 1:
            raise ValidationError(f"heatmap must be square S x S, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("heatmap contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RelBox:
    """Box in coordinates relative to an expanded proposal, each in [0, 1]."""

    cw_rel: float
    ch_rel: float
    w_rel: float
    h_rel: float

    def __post_init__(self):
        vals = (self.cw_rel, self.ch_rel, self.w_rel, self.h_rel)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValidationError(f"relative box components must lie in [0, 1], got {vals}")


@dataclass(frozen=True)
class IntegralParams:
    """Order-statistic weights for the extent estimates (softmaxed in use)."""

    theta_w: np.ndarray
    theta_h: np.ndarray

    def __post_init__(self):
        tw = np.array(self.theta_w, dtype=np.float64, order="C")
        th = np.array(self.theta_h, dtype=np.float64, order="C")
        if tw.ndim != 1 or th.ndim != 1 or tw.size != th.size or tw.size < 1:
            raise ValidationError("theta vectors must be 1-D and the same length")
        if not (np.all(np.isfinite(tw)) and np.all(np.isfinite(th))):
            raise ValidationError("theta vectors contain non-finite values")
        object.__setattr__(self, "theta_w", _freeze(tw))
        object.__setattr__(self, "theta_h", _freeze(th))

    @property
    def grid_size(self) -> int:
        return self.theta_w.size

    @classmethod
    def uniform(cls, grid: int):
        """Zero parameters: every sorted row/column estimate weighs equally."""
        return cls(np.zeros(grid), np.zeros(grid))

    @classmethod
    def max_weighted(cls, grid: int, sharpness: float = 60.0):
        """Nearly all weight on the largest row/column estimate."""
        theta = np.zeros(grid)
        theta[0] = sharpness
        return cls(theta, theta.copy())


@dataclass(frozen=True)
class LocNetWeights:
    """Conv-block stack plus the final 1x1 projection to one logit channel."""

    conv_kernels: tuple
    conv_biases: tuple
    out_kernel: np.ndarray
    out_bias: np.ndarray

    def __post_init__(self):
        if len(self.conv_kernels) < 1 or len(self.conv_biases) != len(self.conv_kernels):
            raise ValidationError("per-block weight tuples must be nonempty and equal length")
        prev = self.conv_kernels[0].shape[1]
        for k, b in zip(self.conv_kernels, self.conv_biases):
            if k.ndim != 4 or k.shape[1] != prev:
                raise ValidationError(f"conv kernel {k.shape} breaks the channel chain at {prev}")
            if b.shape != (k.shape[0],):
                raise ValidationError(f"conv bias {b.shape} does not match {k.shape[0]} channels")
            prev = k.shape[0]
        if self.out_kernel.shape != (1, prev, 1, 1) or self.out_bias.shape != (1,):
            raise ValidationError(f"output conv must be (1, {prev}, 1, 1) with a scalar bias")
        arrays = [*self.conv_kernels, *self.conv_biases, self.out_kernel, self.out_bias]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValidationError("weights contain non-finite values")

    @property
    def block_count(self) -> int:
        return len(self.conv_kernels)

    @property
    def in_channels(self) -> int:
        return self.conv_kernels[0].shape[1]

    @classmethod
    def seeded(cls, in_channels: int, block_count: int = 5, width: int = 256, seed: int = 0):
        """Deterministic fan-in-scaled uniform initialization."""
        rng = np.random.default_rng(seed)
        ck, cb = [], []
        prev = in_channels
        for _ in range(block_count):
            fan = prev * 9
            ck.append(fan_in_uniform(rng, (width, prev, 3, 3), fan))
            cb.append(fan_in_uniform(rng, (width,), fan))
            prev = width
        out_k = fan_in_uniform(rng, (1, prev, 1, 1), prev)
        out_b = fan_in_uniform(rng, (1,), prev)
        return cls(tuple(ck), tuple(cb), out_k, out_b)

    @classmethod
    def zeros(cls, in_channels: int, block_count: int = 1, width: int = 4):
        ck, cb = [], []
        prev = in_channels
        for _ in range(block_count):
            ck.append(np.zeros((width, prev, 3, 3)))
            cb.append(np.zeros(width))
            prev = width
        return cls(tuple(ck), tuple(cb), np.zeros((1, prev, 1, 1)), np.zeros(1))


def save_loc_weights(path, weights: LocNetWeights, params: IntegralParams) -> None:
    """Write the localization stack and theta vectors in one PHW1 file."""
    arrays = []
    for k, b in zip(weights.conv_kernels, weights.conv_biases):
        arrays += [k, b]
    arrays += [weights.out_kernel, weights.out_bias, params.theta_w, params.theta_h]
    write_weight_container(path, BRANCH_LOC, weights.block_count, weights.in_channels, arrays)


def load_loc_weights(path) -> tuple[LocNetWeights, IntegralParams]:
    branch, block_count, in_channels, arrays = read_weight_container(path)
    if branch != BRANCH_LOC:
        raise ValidationError(f"{path}: branch tag {branch} is not a localization net")
    if len(arrays) != 2 * block_count + 4:
        raise ValidationError(
            f"{path}: {len(arrays)} arrays for {block_count} blocks (expected "
            f"{2 * block_count + 4})"
        )
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ck = tuple(arrays[2 * i] for i in range(block_count))
    cb = tuple(arrays[2 * i + 1] for i in range(block_count))
    weights = LocNetWeights(ck, cb, arrays[-4], arrays[-3])
    if weights.in_channels != in_channels:
        raise ValidationError(f"{path}: header says {in_channels} input channels, "
                              f"kernels say {weights.in_channels}")
    return weights, IntegralParams(arrays[-2], arrays[-1])


# A propagator may be a conv stack or any callable producing logits directly
# from (initial heatmap array, per-class similarity array).
Propagator = Union[LocNetWeights, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def expand_proposal(box: BBox) -> BBox:
    """Grow both extents by min(0.4w, 0.4h), keeping the center fixed."""
    m = min(EXPANSION_RATIO * box.w, EXPANSION_RATIO * box.h)
    return BBox(box.cx, box.cy, box.w + m, box.h + m)


def box_to_heatmap(original: BBox, expanded: BBox, grid: int = 16) -> Heatmap:
    """Binary mask of the original box on the expanded proposal's lattice.

    Cell (j, i) is 1 iff the sample point (x0_exp + i/S * w_exp,
    y0_exp + j/S * h_exp) lies in the original box (closed intervals).
    """
    if grid < 1:
        raise ValidationError(f"grid size must be >= 1, got {grid}")
    ex0, ey0, ex1, ey1 = expanded.corners
    x0, y0, x1, y1 = original.corners
    tol = 1e-6 * max(expanded.w, expanded.h, 1.0)
    if x0 < ex0 - tol or y0 < ey0 - tol or x1 > ex1 + tol or y1 > ey1 + tol:
        raise ValidationError(
            f"original box {original.corners} is not contained in expanded {expanded.corners}"
        )
    xs = ex0 + np.arange(grid) / grid * expanded.w
    ys = ey0 + np.arange(grid) / grid * expanded.h
    in_x = (xs >= x0) & (xs <= x1)
    in_y = (ys >= y0) & (ys <= y1)
    mask = (in_y[:, None] & in_x[None, :]).astype(np.float64)
    if not mask.any():
        warnings.warn(
            "initial heatmap is all zeros: the box misses every lattice point",
            ProtoheadWarning,
        )
    return Heatmap(mask)


def propagate(initial: Heatmap, per_class_sim: np.ndarray, weights: LocNetWeights) -> Heatmap:
    """Conv forward pass from [initial, target-class + background sims] to logits."""
    sim = np.asarray(per_class_sim, dtype=np.float64)
    s = initial.grid_size
    if sim.ndim != 3 or sim.shape[0] != s or sim.shape[1] != s:
        raise ValidationError(
            f"similarity stack shape {sim.shape} does not match the {s}x{s} heatmap"
        )
    x = np.concatenate([initial.data[:, :, None], sim], axis=2)
    if x.shape[2] != weights.in_channels:
        raise ValidationError(
            f"propagation input has {x.shape[2]} channels, network expects {weights.in_channels}"
        )
    for k, b in zip(weights.conv_kernels, weights.conv_biases):
        x = np.maximum(conv2d(x, k, b), 0.0)
    logits = conv2d(x, weights.out_kernel, weights.out_bias)[:, :, 0]
    return Heatmap(logits)


def spatial_integral(logits: Heatmap, params: IntegralParams) -> RelBox:
    """Project heatmap logits to a relative box.

    The center is the softmax-weighted mean of the (1-based) cell index
    fractions.  Row/column occupancy estimates (mean sigmoid per row or
    column) are sorted descending and combined under softmax(theta) weights,
    so every component lands in [0, 1] by construction.
    """
    g = logits.data
    s = g.shape[0]
    if params.grid_size != s:
        raise ValidationError(
            f"theta length {params.grid_size} does not match the {s}x{s} heatmap"
        )
    prob = softmax(g)
    idx = np.arange(1, s + 1) / s
    ch_rel = float(prob.sum(axis=1) @ idx)  # rows carry the vertical coordinate
    cw_rel = float(prob.sum(axis=0) @ idx)
    occupancy = sigmoid(g)
    row_est = occupancy.mean(axis=1)  # per-row width estimates
    col_est = occupancy.mean(axis=0)  # per-column height estimates
    w_rel = float(softmax(params.theta_w) @ -np.sort(-row_est))
    h_rel = float(softmax(params.theta_h) @ -np.sort(-col_est))
    return RelBox(cw_rel, ch_rel, w_rel, h_rel)


def to_absolute(rel: RelBox, expanded: BBox) -> BBox:
    """Map a relative box back to absolute pixels within the expansion."""
    if rel.w_rel == 0.0 or rel.h_rel == 0.0:
        raise DegenerateBoxError(f"relative extents must be positive, got {rel}")
    x0e, y0e = expanded.corners[:2]
    return BBox(
        x0e + rel.cw_rel * expanded.w,
        y0e + rel.ch_rel * expanded.h,
        expanded.w * rel.w_rel,
        expanded.h * rel.h_rel,
    )


def _normalize_cells(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=2, keepdims=True)
    return np.where(norms > 1e-12, feats / np.where(norms > 1e-12, norms, 1.0), feats)


def region_propagation_maps(
    proposal: BBox,
    fm: FeatureMap,
    bank: PrototypeBank,
    class_id: int,
    weights: Propagator,
    grid: int = 16,
    normalize: bool = True,
) -> tuple[BBox, Heatmap, Heatmap]:
    """Shared first half of localization.

    Returns (clipped expanded box, initial heatmap, propagated logits).
    """
    if not 0 <= class_id < bank.num_classes:
        raise ValidationError(f"class id {class_id} out of range for C={bank.num_classes}")
    expanded = expand_proposal(proposal).clip(fm.image_width_px, fm.image_height_px)
    original = proposal.clip(fm.image_width_px, fm.image_height_px)
    region = roi_align(fm, expanded, grid)
    feats = _normalize_cells(region.data) if normalize else region.data
    picked = np.concatenate(
        [
            bank.class_prototypes[class_id : class_id + 1],
            bank.background_prototypes,
        ]
    ).astype(np.float64)
    sim = np.einsum("ijd,cd->ijc", feats, picked, optimize=True)  # (S, S, 1+B)
    initial = box_to_heatmap(original, expanded, grid)
    if callable(weights):
        logits = Heatmap(np.asarray(weights(initial.data, sim), dtype=np.float64))
        if logits.grid_size != grid:
            raise ValidationError("injected propagator returned a mismatched grid")
    else:
        logits = propagate(initial, sim, weights)
    return expanded, initial, logits


def localize(
    proposal: BBox,
    fm: FeatureMap,
    bank: PrototypeBank,
    class_id: int,
    weights: Propagator,
    params: IntegralParams,
    grid: int = 16,
    normalize: bool = True,
) -> BBox:
    """Refine a proposal for one class; the result is clipped to the image."""
    expanded, _, logits = region_propagation_maps(
        proposal, fm, bank, class_id, weights, grid, normalize
    )
    refined = to_absolute(spatial_integral(logits, params), expanded)
    try:
        return refined.clip(fm.image_width_px, fm.image_height_px)
    except EmptyRegionError:
        # the center always lands inside the clipped expansion, so a failed
        # clip means the extent underflowed to nothing
        raise DegenerateBoxError(
            f"refined box {refined.corners} has no measurable extent"
        ) from None
