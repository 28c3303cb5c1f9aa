"""Prototype construction: masked mean pooling and optimal-transport clustering.

Class prototypes summarize the backbone features of annotated example
regions.  Two build modes are provided: plain averaging of instance
vectors, and online clustering where instance batches are matched to
centroids through entropic optimal transport and centroids follow with a
momentum update.  Background prototypes keep all centroids instead of
averaging them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    EmptyRegionError,
    ProtoheadWarning,
    ValidationError,
)
from .feature_io import BBox, FeatureMap, PrototypeBank, load_feature_map, _freeze

_ZERO_NORM = 1e-12
# scale of the symmetry-breaking noise added to mean-initialized centroids
_CENTROID_JITTER = 1e-4


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; zero vectors are returned unchanged with a warning."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm < _ZERO_NORM:
        warnings.warn("cannot normalize a zero vector; leaving it unscaled", ProtoheadWarning)
        return vec
    return vec / norm


@dataclass(frozen=True)
class InstancePrototype:
    """Mean feature vector of one annotated object instance."""

    vector: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64, order="C")
        if vec.ndim != 1 or vec.size < 1:
            raise ValidationError(f"instance vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValidationError("instance vector contains non-finite values")
        object.__setattr__(self, "vector", _freeze(vec))

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class CentroidSet:
    """c running centroids for one class."""

    centroids: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        cen = np.array(self.centroids, dtype=np.float64, order="C")
        if cen.ndim != 2 or cen.shape[0] < 1:
            raise ValidationError(f"centroids must be c x D with c >= 1, got {cen.shape}")
        if not np.all(np.isfinite(cen)):
            raise ValidationError("centroids contain non-finite values")
        object.__setattr__(self, "centroids", _freeze(cen))


@dataclass(frozen=True)
class TransportPlan:
    """Entropic optimal-transport plan with its marginals."""

    gamma: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=np.float64, order="C")
        a = np.array(self.row_marginal, dtype=np.float64, order="C")
        b = np.array(self.col_marginal, dtype=np.float64, order="C")
        if g.shape != (a.size, b.size):
            raise ValidationError(f"plan shape {g.shape} does not match marginals {a.size}x{b.size}")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ValidationError("plan entries must be finite and nonnegative")
        for arr in (g, a, b):
            _freeze(arr)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "row_marginal", a)
        object.__setattr__(self, "col_marginal", b)

    @property
    def max_marginal_residual(self) -> float:
        row = np.abs(self.gamma.sum(axis=1) - self.row_marginal).max()
        col = np.abs(self.gamma.sum(axis=0) - self.col_marginal).max()
        return float(max(row, col))


def _check_marginal(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1 or m.size < 1:
        raise ValidationError(f"{name} must be a 1-D probability vector")
    if not np.all(np.isfinite(m)) or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} is not a probability vector (sum={m.sum()!r})")
    return m


def _scaling_sweeps(K, a, b, iters, relaxation, tol=1e-14, record=None):
    """Run alternating row/column scalings; returns final (u, v).

    Sweeps stop early once the marginal residual falls below `tol`
    (machine-level by default, so the returned plan is indistinguishable
    from the full run).  With relaxation="auto", plain scalings run during
    a warm-up phase, the linear convergence rate is estimated from the
    residual decay, and the remaining sweeps use over-relaxed scalings
    u *= r**omega with omega = 2 / (1 + sqrt(1 - rate)).  A relaxed
    half-step falls back to the plain one whenever it fails to shrink its
    own marginal residual, so each half-step is non-expansive on the
    marginal it targets.
    """
    n, m = K.shape
    u = np.ones(n)
    v = np.ones(m)
    omega = 1.0 if relaxation == "auto" else float(relaxation)
    warmup = min(100, max(10, iters // 10))
    probe = None
    track = record is not None

    def ratio(target, cur):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = target / cur
        bad = ~np.isfinite(r)
        if np.any(bad & (target > 0)):
            raise ConvergenceError("scaling factor is non-finite (kernel underflow)")
        r[bad] = 0.0
        return r

    kv = K @ v
    for t in range(iters):
        relaxed = omega != 1.0
        if relaxed or track:
            row_pre = np.abs(u * kv - a).max()
        r = ratio(a, u * kv)
        if relaxed:
            u_new = u * r**omega
            u = u * r if np.abs(u_new * kv - a).max() > row_pre else u_new
        else:
            u = u * r
        if track:
            record("row", np.abs(u * kv - a).max(), row_pre)

        ktu = K.T @ u
        if relaxed or track:
            col_pre = np.abs(v * ktu - b).max()
        c = ratio(b, v * ktu)
        if relaxed:
            v_new = v * c**omega
            v = v * c if np.abs(v_new * ktu - b).max() > col_pre else v_new
        else:
            v = v * c
        if track:
            record("col", np.abs(v * ktu - b).max(), col_pre)

        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ConvergenceError("scaling factors diverged to non-finite values")

        kv = K @ v  # reused by the next sweep
        err = np.abs(u * kv - a).max()
        if err <= tol:
            break
        if relaxation == "auto" and omega == 1.0:
            if t == warmup // 2:
                probe = (t, err)
            elif t == warmup and probe is not None:
                t0, e0 = probe
                if e0 > err > tol:
                    rate = (err / e0) ** (1.0 / (t - t0))
                    omega = min(1.95, 2.0 / (1.0 + np.sqrt(max(1e-12, 1.0 - rate))))
    return u, v


def sinkhorn(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float = 0.05,
    iters: int = 1000,
    relaxation: float | str = "auto",
    tol: float = 1e-14,
) -> TransportPlan:
    """Entropic-regularized optimal transport via alternating scalings.

    Args:
        cost: n x m cost matrix, finite.
        a, b: source/target probability vectors (length n and m).
        epsilon: entropic regularization strength, > 0.
        iters: maximum number of full row+column scaling sweeps.
        relaxation: "auto" for rate-adaptive over-relaxation, or a fixed
            factor (1.0 reproduces the textbook iteration).
        tol: marginal residual at which sweeps stop early.

    Returns:
        TransportPlan with gamma = diag(u) * exp(-cost/epsilon) * diag(v).
    """
    a = _check_marginal("row marginal", a)
    b = _check_marginal("col marginal", b)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape != (a.size, b.size):
        raise ValidationError(f"cost must be {a.size}x{b.size}, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix contains non-finite values")
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ValidationError(f"iteration count must be >= 1, got {iters}")
    if relaxation != "auto" and not 1.0 <= float(relaxation) < 2.0:
        raise ValidationError(f"relaxation must be 'auto' or in [1, 2), got {relaxation}")
    if tol < 0:
        raise ValidationError(f"tolerance must be >= 0, got {tol}")
    kernel = np.exp(-cost / epsilon)
    u, v = _scaling_sweeps(kernel, a, b, iters, relaxation, tol)
    gamma = u[:, None] * kernel * v[None, :]
    if not np.all(np.isfinite(gamma)):
        raise ConvergenceError("transport plan diverged to non-finite values")
    return TransportPlan(gamma, a, b)


def sinkhorn_residual_trace(cost, a, b, epsilon=0.05, iters=1000, relaxation="auto",
                            tol=1e-14):
    """Diagnostic: per-half-step (side, post, pre) marginal residuals."""
    a = _check_marginal("row marginal", a)
    b = _check_marginal("col marginal", b)
    kernel = np.exp(-np.asarray(cost, dtype=np.float64) / epsilon)
    trace: list[tuple[str, float, float]] = []
    _scaling_sweeps(
        kernel, a, b, iters, relaxation, tol,
        record=lambda side, post, pre: trace.append((side, float(post), float(pre))),
    )
    return trace


def instance_prototype(
    fm: FeatureMap,
    region: BBox | np.ndarray,
    class_id: int = 0,
    normalize: bool = True,
) -> InstancePrototype:
    """Mean patch feature over a region given as a box or a patch-grid mask.

    A box selects every patch cell whose center falls inside it (closed);
    a boolean mask of shape (H, W) selects cells directly.
    """
    if isinstance(region, BBox):
        s = float(fm.patch_stride_px)
        cx = (np.arange(fm.width_patches) + 0.5) * s
        cy = (np.arange(fm.height_patches) + 0.5) * s
        x0, y0, x1, y1 = region.corners
        mask = ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
    else:
        mask = np.asarray(region, dtype=bool)
        if mask.shape != (fm.height_patches, fm.width_patches):
            raise ValidationError(
                f"mask shape {mask.shape} does not match the "
                f"{fm.height_patches}x{fm.width_patches} patch grid"
            )
    if not mask.any():
        raise EmptyRegionError("region selects no patch cells")
    vec = fm.data[mask].astype(np.float64).mean(axis=0)
    if normalize:
        vec = l2_normalize(vec)
    return InstancePrototype(vec, class_id)


def cluster_step(
    centroids: CentroidSet,
    batch: Sequence[InstancePrototype],
    beta: float,
    epsilon: float = 0.05,
    iters: int = 1000,
) -> CentroidSet:
    """One online-clustering update of the centroids against a batch.

    Matches centroids to batch vectors through an optimal-transport plan
    under the negative-dot-product cost with uniform marginals, then moves
    the centroids with momentum: C' = (1-beta)*C + beta*(plan @ Q).
    """
    if len(batch) == 0:
        raise ValidationError("batch must be nonempty")
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"momentum beta must lie in [0, 1], got {beta}")
    if any(p.class_id != centroids.class_id for p in batch):
        raise ValidationError("batch mixes classes with the centroid set")
    q = np.stack([p.vector for p in batch])
    cen = centroids.centroids
    if q.shape[1] != cen.shape[1]:
        raise ValidationError(f"dimension mismatch: centroids {cen.shape[1]}, batch {q.shape[1]}")
    c, n = cen.shape[0], q.shape[0]
    plan = sinkhorn(-(cen @ q.T), np.full(c, 1.0 / c), np.full(n, 1.0 / n), epsilon, iters)
    return CentroidSet((1.0 - beta) * cen + beta * (plan.gamma @ q), centroids.class_id)


def _init_centroids(vectors: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    # mean-anchored with small noise so transport can break the symmetry
    mu = vectors.mean(axis=0)
    scale = _CENTROID_JITTER * max(float(np.linalg.norm(mu)), 1.0)
    return mu[None, :] + scale * rng.standard_normal((count, vectors.shape[1]))


def _run_clustering(
    instances: Sequence[InstancePrototype],
    centroids: int,
    beta: float,
    steps: int,
    epsilon: float,
    iters: int,
    rng: np.random.Generator,
) -> CentroidSet:
    vectors = np.stack([p.vector for p in instances])
    state = CentroidSet(_init_centroids(vectors, centroids, rng), instances[0].class_id)
    for _ in range(steps):
        order = rng.permutation(len(instances))
        state = cluster_step(state, [instances[k] for k in order], beta, epsilon, iters)
    return state


def build_class_prototype(
    instances: Sequence[InstancePrototype],
    mode: str = "mean",
    centroids: int = 10,
    beta: float = 0.002,
    steps: int = 100,
    epsilon: float = 0.05,
    iters: int = 1000,
    seed: int = 0,
    normalize: bool = True,
) -> np.ndarray:
    """Build one class prototype from its instance prototypes.

    mode "mean" averages the instances directly; mode "cluster" runs the
    momentum clustering for `steps` shuffled full-batch passes and averages
    the resulting centroids.
    """
    if len(instances) == 0:
        raise ValidationError("cannot build a prototype from zero instances")
    if centroids < 1 or steps < 0:
        raise ValidationError(f"need centroids >= 1 and steps >= 0, got {centroids}, {steps}")
    if mode == "mean":
        proto = np.stack([p.vector for p in instances]).mean(axis=0)
    elif mode == "cluster":
        rng = np.random.default_rng(seed)
        state = _run_clustering(instances, centroids, beta, steps, epsilon, iters, rng)
        proto = state.centroids.mean(axis=0)
    else:
        raise ValidationError(f"unknown prototype mode {mode!r}")
    return l2_normalize(proto) if normalize else proto


def build_background_prototypes(
    groups: Mapping[str, Sequence[InstancePrototype]],
    centroids: int = 10,
    beta: float = 0.002,
    steps: int = 100,
    epsilon: float = 0.05,
    iters: int = 1000,
    seed: int = 0,
    normalize: bool = True,
) -> np.ndarray:
    """Cluster each background class and keep all centroids (no averaging).

    Returns a (len(groups) * centroids) x D array ordered by group, then
    centroid index.  Empty groups are skipped with a warning.
    """
    if centroids < 1 or steps < 0:
        raise ValidationError(f"need centroids >= 1 and steps >= 0, got {centroids}, {steps}")
    rows = []
    for name, instances in groups.items():
        if len(instances) == 0:
            warnings.warn(f"background class {name!r} has no instances; skipped", ProtoheadWarning)
            continue
        rng = np.random.default_rng(seed)
        state = _run_clustering(list(instances), centroids, beta, steps, epsilon, iters, rng)
        cen = state.centroids
        if normalize:
            cen = np.stack([l2_normalize(c) for c in cen])
        if rows and cen.shape[1] != rows[0].shape[1]:
            raise ValidationError("background groups have mismatched feature dimensions")
        rows.append(cen)
    if not rows:
        raise ValidationError("every background group is empty")
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Instance-list files: one JSON record per line with a feature-file path, a
# class name, and a region (pixel box corners, or a patch-grid mask as
# row-major run lengths alternating zeros/ones counts).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceRecord:
    feature_path: str
    class_name: str
    region: BBox | np.ndarray


def mask_to_rle(mask: np.ndarray) -> dict:
    """Encode a boolean (H, W) mask as row-major alternating run lengths."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    edges = np.flatnonzero(np.diff(flat.astype(np.int8)))
    bounds = np.concatenate([[0], edges + 1, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_to_mask(obj: dict) -> np.ndarray:
    """Decode the run-length mask encoding produced by mask_to_rle."""
    try:
        h, w = (int(x) for x in obj["size"])
        counts = [int(x) for x in obj["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed RLE mask object: {obj!r}") from exc
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise ValidationError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for run in counts:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    return flat.reshape(h, w)


def parse_instance_record(line: str) -> InstanceRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"instance record is not valid JSON: {line!r}") from exc
    try:
        feature = str(obj["feature"])
        name = str(obj["class"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"instance record needs 'feature' and 'class': {line!r}") from exc
    if "box" in obj:
        region = BBox.from_corners(*(float(v) for v in obj["box"]))
    elif "mask" in obj:
        region = rle_to_mask(obj["mask"])
    else:
        raise ValidationError(f"instance record needs a 'box' or 'mask' region: {line!r}")
    return InstanceRecord(feature, name, region)


def load_instance_records(path) -> list[InstanceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(parse_instance_record(line))
    if not records:
        raise ValidationError(f"{path}: no instance records found")
    return records


def build_bank(
    records: Sequence[InstanceRecord],
    background_classes: Sequence[str] = (),
    mode: str = "mean",
    centroids: int = 10,
    beta: float = 0.002,
    steps: int = 100,
    epsilon: float = 0.05,
    iters: int = 1000,
    seed: int = 0,
    normalize: bool = True,
    feature_root: str | Path | None = None,
) -> PrototypeBank:
    """Assemble a prototype bank from instance records.

    Classes listed in background_classes contribute background prototypes
    (all centroids kept); the remaining classes become the bank's C class
    prototypes, ordered by first appearance.
    """
    background = tuple(background_classes)
    root = Path(feature_root) if feature_root is not None else None
    cache: dict[str, FeatureMap] = {}
    by_class: dict[str, list[InstancePrototype]] = {}
    order: list[str] = []
    for rec in records:
        key = rec.feature_path
        if key not in cache:
            path = Path(key)
            if root is not None and not path.is_absolute():
                path = root / path
            cache[key] = load_feature_map(path)
        if rec.class_name not in by_class:
            by_class[rec.class_name] = []
            if rec.class_name not in background:
                order.append(rec.class_name)
        proto = instance_prototype(cache[key], rec.region, normalize=normalize)
        by_class[rec.class_name].append(proto)
    if not order:
        raise ValidationError("instance records contain no foreground classes")
    cls = np.stack(
        [
            build_class_prototype(
                by_class[name], mode, centroids, beta, steps, epsilon, iters, seed, normalize
            )
            for name in order
        ]
    )
    bg_groups = {name: by_class.get(name, []) for name in background}
    if any(len(v) for v in bg_groups.values()):
        bg = build_background_prototypes(
            bg_groups, centroids, beta, steps, epsilon, iters, seed, normalize
        )
    else:
        bg = np.zeros((0, cls.shape[1]), dtype=np.float64)
    return PrototypeBank(cls, tuple(order), bg, normalized=normalize)
