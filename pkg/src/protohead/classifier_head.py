"""One-vs-rest classification over prototype similarity maps.

A region's features are projected onto all prototypes to form a similarity
map.  For each candidate class the map is rearranged into a fixed-width
class-specific layout (target channel, sorted-and-resampled other-class
block, untouched background channels) and scored by a small convolutional
network with spatial-attention gating.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ProtoheadWarning, ValidationError
from .feature_io import PrototypeBank, RegionFeatures, _freeze
from .network import (
    BRANCH_CLS,
    conv2d,
    fan_in_uniform,
    read_weight_container,
    sigmoid,
    write_weight_container,
)


@dataclass(frozen=True)
class SimilarityMap:
    """S x S x (C+B) per-cell dot products, class channels first."""

    data: np.ndarray
    class_count: int
    background_count: int

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3 or data.shape[0] != data.shape[1]:
            raise ValidationError(f"similarity map must be S x S x (C+B), got {data.shape}")
        if data.shape[2] != self.class_count + self.background_count or self.class_count < 1:
            raise ValidationError(
                f"{data.shape[2]} channels inconsistent with C={self.class_count}, "
                f"B={self.background_count}"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("similarity map contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ClassSpecificMap:
    """S x S x (1+T+B) rearranged map for one target class."""

    data: np.ndarray
    target_class: int

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3 or data.shape[0] != data.shape[1]:
            raise ValidationError(f"class-specific map must be S x S x C, got {data.shape}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ClsNetWeights:
    """Per-block 3x3 conv + 1x1 attention conv, then a pooled linear head."""

    conv_kernels: tuple
    conv_biases: tuple
    attn_kernels: tuple
    attn_biases: tuple
    head_weight: np.ndarray
    head_bias: float

    def __post_init__(self):
        n = len(self.conv_kernels)
        if n < 1 or not (
            len(self.conv_biases) == len(self.attn_kernels) == len(self.attn_biases) == n
        ):
            raise ValidationError("per-block weight tuples must be nonempty and equal length")
        prev = self.conv_kernels[0].shape[1]
        for k, b, ak, ab in zip(
            self.conv_kernels, self.conv_biases, self.attn_kernels, self.attn_biases
        ):
            if k.ndim != 4 or k.shape[1] != prev:
                raise ValidationError(f"conv kernel {k.shape} breaks the channel chain at {prev}")
            if b.shape != (k.shape[0],):
                raise ValidationError(f"conv bias {b.shape} does not match {k.shape[0]} channels")
            if ak.shape != (1, k.shape[0], 1, 1) or ab.shape != (1,):
                raise ValidationError(f"attention conv must be (1, {k.shape[0]}, 1, 1)")
            prev = k.shape[0]
        if self.head_weight.shape != (prev,):
            raise ValidationError(f"head weight {self.head_weight.shape} does not match {prev}")
        arrays = [*self.conv_kernels, *self.conv_biases, *self.attn_kernels,
                  *self.attn_biases, self.head_weight]
        if not all(np.all(np.isfinite(a)) for a in arrays) or not np.isfinite(self.head_bias):
            raise ValidationError("weights contain non-finite values")

    @property
    def block_count(self) -> int:
        return len(self.conv_kernels)

    @property
    def in_channels(self) -> int:
        return self.conv_kernels[0].shape[1]

    @classmethod
    def seeded(cls, in_channels: int, block_count: int = 3, width: int = 256, seed: int = 0):
        """Deterministic fan-in-scaled uniform initialization."""
        rng = np.random.default_rng(seed)
        ck, cb, ak, ab = [], [], [], []
        prev = in_channels
        for _ in range(block_count):
            fan = prev * 9
            ck.append(fan_in_uniform(rng, (width, prev, 3, 3), fan))
            cb.append(fan_in_uniform(rng, (width,), fan))
            ak.append(fan_in_uniform(rng, (1, width, 1, 1), width))
            ab.append(fan_in_uniform(rng, (1,), width))
            prev = width
        head_w = fan_in_uniform(rng, (prev,), prev)
        head_b = float(fan_in_uniform(rng, (1,), prev)[0])
        return cls(tuple(ck), tuple(cb), tuple(ak), tuple(ab), head_w, head_b)

    @classmethod
    def zeros(cls, in_channels: int, block_count: int = 1, width: int = 4):
        prev = in_channels
        ck, cb, ak, ab = [], [], [], []
        for _ in range(block_count):
            ck.append(np.zeros((width, prev, 3, 3)))
            cb.append(np.zeros(width))
            ak.append(np.zeros((1, width, 1, 1)))
            ab.append(np.zeros(1))
            prev = width
        return cls(tuple(ck), tuple(cb), tuple(ak), tuple(ab), np.zeros(prev), 0.0)

    def save(self, path) -> None:
        arrays = []
        for k, b, ak, ab in zip(
            self.conv_kernels, self.conv_biases, self.attn_kernels, self.attn_biases
        ):
            arrays += [k, b, ak, ab]
        arrays += [self.head_weight, np.array([self.head_bias])]
        write_weight_container(path, BRANCH_CLS, self.block_count, self.in_channels, arrays)

    @classmethod
    def load(cls, path):
        branch, block_count, in_channels, arrays = read_weight_container(path)
        if branch != BRANCH_CLS:
            raise ValidationError(f"{path}: branch tag {branch} is not a classification net")
        if len(arrays) != 4 * block_count + 2:
            raise ValidationError(
                f"{path}: {len(arrays)} arrays for {block_count} blocks (expected "
                f"{4 * block_count + 2})"
            )
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        ck = tuple(arrays[4 * i] for i in range(block_count))
        cb = tuple(arrays[4 * i + 1] for i in range(block_count))
        ak = tuple(arrays[4 * i + 2] for i in range(block_count))
        ab = tuple(arrays[4 * i + 3] for i in range(block_count))
        out = cls(ck, cb, ak, ab, arrays[-2], float(arrays[-1][0]))
        if out.in_channels != in_channels:
            raise ValidationError(f"{path}: header says {in_channels} input channels, "
                                  f"kernels say {out.in_channels}")
        return out


def prototype_projection(region: RegionFeatures, bank: PrototypeBank) -> SimilarityMap:
    """Per-cell dot product of region features against every prototype."""
    if region.dim != bank.dim:
        raise ValidationError(
            f"feature dimension {region.dim} does not match bank dimension {bank.dim}"
        )
    sims = np.einsum("ijd,cd->ijc", region.data, bank.matrix(), optimize=True)
    return SimilarityMap(sims, bank.num_classes, bank.num_backgrounds)


def preselect_classes(region: RegionFeatures, bank: PrototypeBank, k: int) -> list[int]:
    """Top-k class ids by mean-feature similarity, descending, ties by index."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if region.dim != bank.dim:
        raise ValidationError(
            f"feature dimension {region.dim} does not match bank dimension {bank.dim}"
        )
    mean_feat = region.data.mean(axis=(0, 1))
    scores = bank.class_prototypes.astype(np.float64) @ mean_feat
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[: min(k, bank.num_classes)]]


def _resample_channels(block: np.ndarray, t: int) -> np.ndarray:
    """Linear resample along the channel axis, endpoints preserved."""
    n = block.shape[2]
    if n == t:
        return block
    pos = np.arange(t) * (n - 1) / (t - 1) if t > 1 else np.zeros(1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return block[:, :, lo] * (1.0 - frac) + block[:, :, hi] * frac


def rearrange(sim: SimilarityMap, target: int, t: int) -> ClassSpecificMap:
    """Build the fixed-width class-specific map for one target class.

    Non-target class channels are sorted descending per cell, then cut to
    the top t (when C-1 > t) or linearly resampled up to width t; background
    channels pass through unchanged after the rearranged block.
    """
    c = sim.class_count
    if not 0 <= target < c:
        raise ValidationError(f"target class {target} out of range for C={c}")
    if t < 1:
        raise ValidationError(f"rearranged width must be >= 1, got {t}")
    s = sim.grid_size
    target_plane = sim.data[:, :, target : target + 1]
    backgrounds = sim.data[:, :, c:]
    if c == 1:
        warnings.warn(
            "single-class bank: the rearranged block has no source channels and is zero-filled",
            ProtoheadWarning,
        )
        block = np.zeros((s, s, t))
    else:
        others = np.delete(sim.data[:, :, :c], target, axis=2)
        block = -np.sort(-others, axis=2)
        block = block[:, :, :t] if block.shape[2] > t else _resample_channels(block, t)
    return ClassSpecificMap(
        np.concatenate([target_plane, block, backgrounds], axis=2), target
    )


def classify(cmap: ClassSpecificMap, weights: ClsNetWeights) -> float:
    """Forward pass: gated conv blocks, global average pool, linear, sigmoid."""
    x = cmap.data
    if x.shape[2] != weights.in_channels:
        raise ValidationError(
            f"map has {x.shape[2]} channels, network expects {weights.in_channels}"
        )
    for k, b, ak, ab in zip(
        weights.conv_kernels, weights.conv_biases, weights.attn_kernels, weights.attn_biases
    ):
        x = np.maximum(conv2d(x, k, b), 0.0)
        x = x * sigmoid(conv2d(x, ak, ab))  # spatial attention gate, (S, S, 1)
    logit = float(x.mean(axis=(0, 1)) @ weights.head_weight + weights.head_bias)
    if not np.isfinite(logit):
        raise NumericalError("classification head produced a non-finite logit")
    return float(sigmoid(logit))


def score_proposal(
    region: RegionFeatures,
    bank: PrototypeBank,
    k: int,
    t: int,
    weights: ClsNetWeights,
) -> np.ndarray:
    """Sparse per-class scores: the k pre-selected classes are scored through
    rearrange + classify, every other class is exactly 0."""
    sim = prototype_projection(region, bank)
    scores = np.zeros(bank.num_classes)
    for c in preselect_classes(region, bank, k):
        scores[c] = classify(rearrange(sim, c, t), weights)
    return scores
