"""Rule-based pipeline parameters derived from the dataset fingerprint.

Target spacing, network topology (patch size, pooling, kernels), the
low-resolution trigger and the anchor sizes are all fixed functions of the
fingerprint and the training boxes. GPU memory is stood in for by a voxel
budget on the patch.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from detpipe._stats import nearest_rank_many
from detpipe.dataio import BoundingBox
from detpipe.fingerprint import DatasetFingerprint

BATCH_SIZE = 4
MAX_POOLS = 6
MIN_FEATURE_EXTENT = 4
DEFAULT_VOXEL_BUDGET = 128 ** 3
TARGET_ANISOTROPY = 3.0
POOL_ANISOTROPY = 2.0
LOWRES_COVERAGE = 0.25
ANCHOR_STEP = 1.25
ANCHOR_SWEEPS = 3
MAX_ANCHOR_BOXES = 5_000
MAX_LINE_STEPS = 64
ANCHOR_SCAN_QUANTILES = 32
HEAD_LEVEL0_STRIDE = 2
MAX_HEAD_LEVELS = 4


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class TopologyPlan:
    target_spacing_mm: tuple[float, float, float]
    patch_size: tuple[int, int, int]
    num_pool_per_axis: tuple[int, int, int]
    pool_strides: tuple[tuple[int, int, int], ...]
    kernel_plan: tuple[tuple[int, int, int], ...]
    batch_size: int = BATCH_SIZE

    @property
    def num_levels(self) -> int:
        return len(self.pool_strides) + 1

    @property
    def deepest_extent(self) -> tuple[int, int, int]:
        return tuple(p // 2 ** n for p, n in zip(self.patch_size, self.num_pool_per_axis))

    def to_dict(self) -> dict:
        return {
            "target_spacing_mm": list(self.target_spacing_mm),
            "patch_size": list(self.patch_size),
            "num_pool_per_axis": list(self.num_pool_per_axis),
            "pool_strides": [list(s) for s in self.pool_strides],
            "kernel_plan": [list(k) for k in self.kernel_plan],
            "batch_size": self.batch_size,
            "num_levels": self.num_levels,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TopologyPlan":
        return cls(
            tuple(float(v) for v in d["target_spacing_mm"]),
            tuple(int(v) for v in d["patch_size"]),
            tuple(int(v) for v in d["num_pool_per_axis"]),
            tuple(tuple(int(v) for v in s) for s in d["pool_strides"]),
            tuple(tuple(int(v) for v in k) for k in d["kernel_plan"]),
            int(d.get("batch_size", BATCH_SIZE)),
        )


@dataclass(frozen=True)
class AnchorPlan:
    sizes_per_axis: tuple[tuple[float, float, float], ...]
    objective_trace: tuple[float, ...] = ()
    level0_stride: int = HEAD_LEVEL0_STRIDE
    num_head_levels: int = 1
    per_level_scale: float = 2.0

    @property
    def anchors(self) -> list[tuple[float, float, float]]:
        """All 27 sizes: Cartesian product of the per-axis triples (x varies slowest)."""
        return [tuple(s) for s in itertools.product(*self.sizes_per_axis)]

    def level_sizes(self, level: int) -> np.ndarray:
        return np.array(self.anchors) * self.per_level_scale ** level

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")

    def to_dict(self) -> dict:
        return {
            "sizes_per_axis": [list(s) for s in self.sizes_per_axis],
            "anchors": [list(a) for a in self.anchors],
            "objective_trace": list(self.objective_trace),
            "level0_stride": self.level0_stride,
            "num_head_levels": self.num_head_levels,
            "per_level_scale": self.per_level_scale,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnchorPlan":
        return cls(
            tuple(tuple(float(v) for v in s) for s in d["sizes_per_axis"]),
            tuple(float(v) for v in d.get("objective_trace", ())),
            int(d.get("level0_stride", HEAD_LEVEL0_STRIDE)),
            int(d.get("num_head_levels", 1)),
            float(d.get("per_level_scale", 2.0)),
        )


@dataclass(frozen=True)
class PipelinePlan:
    topology: TopologyPlan
    anchors: AnchorPlan
    lowres_triggered: bool = False
    lowres_topology: TopologyPlan | None = None

    def __post_init__(self):
        if self.lowres_triggered != (self.lowres_topology is not None):
            raise PlanningError("lowres_topology must be present exactly when the trigger fires")

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "anchors": self.anchors.to_dict(),
            "lowres_triggered": self.lowres_triggered,
            "lowres_topology": None if self.lowres_topology is None else self.lowres_topology.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelinePlan":
        lr = d.get("lowres_topology")
        return cls(
            TopologyPlan.from_dict(d["topology"]),
            AnchorPlan.from_dict(d["anchors"]),
            bool(d.get("lowres_triggered", False)),
            None if lr is None else TopologyPlan.from_dict(lr),
        )


# --------------------------------------------------------------------------
# Spacing and topology
# --------------------------------------------------------------------------


def target_spacing(fp: DatasetFingerprint) -> tuple[float, float, float]:
    """Median spacing per axis; strongly anisotropic axes fall back to their p10."""
    p50 = fp.spacing("p50")
    p10 = fp.spacing("p10")
    lowest = min(p50)
    return tuple(p10[a] if p50[a] > TARGET_ANISOTROPY * lowest else p50[a] for a in range(3))


def median_resampled_shape(fp: DatasetFingerprint, spacing: Sequence[float]) -> tuple[int, int, int]:
    return tuple(max(1, int(round(fp.median_size_mm[a] / spacing[a]))) for a in range(3))


def pooling_plan(patch: Sequence[int], spacing: Sequence[float]):
    """Pool counts, per-level strides and per-level kernels for a patch.

    An axis pools at a level while its feature extent is >= 8, it has pooled
    fewer than 6 times and its current spacing is within 2x of the finest
    spacing among the axes that can still pool.
    """
    extent = [int(p) for p in patch]
    spacing = [float(s) for s in spacing]
    pools = [0, 0, 0]
    strides, kernels = [], []
    while True:
        kernel = tuple(3 if spacing[a] <= POOL_ANISOTROPY * min(spacing) else 1 for a in range(3))
        poolable = [a for a in range(3) if extent[a] >= 2 * MIN_FEATURE_EXTENT and pools[a] < MAX_POOLS]
        if not poolable:
            kernels.append(kernel)
            break
        finest = min(spacing[a] for a in poolable)
        chosen = [a for a in poolable if spacing[a] <= POOL_ANISOTROPY * finest]
        kernels.append(kernel)
        strides.append(tuple(2 if a in chosen else 1 for a in range(3)))
        for a in chosen:
            extent[a] //= 2
            spacing[a] *= 2
            pools[a] += 1
    return tuple(pools), tuple(strides), tuple(kernels)


def plan_topology(fp: DatasetFingerprint, voxel_budget: int = DEFAULT_VOXEL_BUDGET,
                  spacing: Sequence[float] | None = None) -> TopologyPlan:
    """Iteratively shrink the patch from the median resampled shape until it fits the budget."""
    if voxel_budget < MIN_FEATURE_EXTENT ** 3:
        raise PlanningError(
            f"voxel budget {voxel_budget} cannot fit the minimum patch {MIN_FEATURE_EXTENT}^3"
        )
    spacing = tuple(float(s) for s in (spacing if spacing is not None else target_spacing(fp)))
    reference = [max(MIN_FEATURE_EXTENT, s) for s in median_resampled_shape(fp, spacing)]
    patch = list(reference)

    while True:
        pools, _, _ = pooling_plan(patch, spacing)
        patch = [p // 2 ** n * 2 ** n for p, n in zip(patch, pools)]
        if math.prod(patch) <= voxel_budget:
            break
        shrinkable = [a for a in range(3) if patch[a] > MIN_FEATURE_EXTENT]
        # relative size first, then physical size, then lowest axis index
        axis = max(shrinkable, key=lambda a: (patch[a] / reference[a], patch[a] * spacing[a], -a))
        patch[axis] = max(MIN_FEATURE_EXTENT, patch[axis] // 2)

    pools, strides, kernels = pooling_plan(patch, spacing)
    plan = TopologyPlan(spacing, tuple(patch), pools, strides, kernels, BATCH_SIZE)
    _check_topology(plan)
    return plan


def _check_topology(plan: TopologyPlan) -> None:
    for p, n in zip(plan.patch_size, plan.num_pool_per_axis):
        if p % 2 ** n or p // 2 ** n < MIN_FEATURE_EXTENT or n > MAX_POOLS:
            raise PlanningError(f"inconsistent topology {plan}")


def lowres_trigger(fp: DatasetFingerprint, topo: TopologyPlan) -> bool:
    """Whether the patch sees too little context for a full-resolution model alone."""
    image = median_resampled_shape(fp, topo.target_spacing_mm)
    if math.prod(topo.patch_size) < LOWRES_COVERAGE * math.prod(image):
        return True
    p99 = fp.object_extent("p99")
    if p99 is None:
        return False
    return any(p99[a] / topo.target_spacing_mm[a] > topo.patch_size[a] for a in range(3))


def lowres_spacing(fp: DatasetFingerprint, spacing: Sequence[float]) -> tuple[float, float, float]:
    """Doubled spacing, but never so coarse that the median image shrinks below the minimum patch."""
    return tuple(
        max(spacing[a], min(2 * spacing[a], fp.median_size_mm[a] / MIN_FEATURE_EXTENT))
        for a in range(3)
    )


# --------------------------------------------------------------------------
# Anchors
# --------------------------------------------------------------------------


def _extents(train_boxes) -> np.ndarray:
    if isinstance(train_boxes, np.ndarray):
        ext = np.asarray(train_boxes, dtype=float).reshape(-1, 3)
    else:
        ext = np.array([b.extent if isinstance(b, BoundingBox) else tuple(b) for b in train_boxes],
                       dtype=float).reshape(-1, 3)
    if np.any(ext <= 0):
        raise PlanningError("box extents must be positive")
    return ext


def anchor_objective(extents: np.ndarray, sizes_per_axis) -> float:
    """Mean over boxes of the best IoU with any of the 27 centre-aligned anchors."""
    sx, sy, sz = (np.asarray(s, dtype=float) for s in sizes_per_axis)
    ex, ey, ez = extents[:, 0:1], extents[:, 1:2], extents[:, 2:3]
    # anchors in itertools.product order: x slowest, z fastest
    inter = (np.minimum(ex, sx)[:, :, None, None] * np.minimum(ey, sy)[:, None, :, None]
             * np.minimum(ez, sz)[:, None, None, :]).reshape(len(extents), -1)
    vol_a = (sx[:, None, None] * sy[None, :, None] * sz[None, None, :]).ravel()
    union = np.prod(extents, axis=1)[:, None] + vol_a[None, :] - inter
    return float(np.mean(np.max(inter / union, axis=1)))


def optimize_anchors(train_boxes, iters: int = ANCHOR_SWEEPS, seed: int = 0,
                     level0_stride: int = HEAD_LEVEL0_STRIDE, num_head_levels: int = 1) -> AnchorPlan:
    """Fit three anchor sizes per axis by coordinate descent on the mean max-IoU.

    ``train_boxes`` are boxes (or an ``(N, 3)`` array of extents) in voxels at
    the target spacing. Sizes start at the p25/p50/p75 extents. Every sweep
    visits each size in turn: it first tries the extent quantiles of that
    axis as replacement values, then a multiplicative line search up and
    down. Only strictly improving moves are kept. The first sweep steps by
    x1.25 / x0.8, each further sweep by the square root of the previous step.
    """
    extents = _extents(train_boxes)
    if len(extents) == 0:
        raise PlanningError("anchor optimization requires objects in the training split")
    if len(extents) > MAX_ANCHOR_BOXES:
        rng = np.random.default_rng(seed)
        extents = extents[np.sort(rng.choice(len(extents), MAX_ANCHOR_BOXES, replace=False))]

    sizes = np.array([nearest_rank_many(extents[:, a], (0.25, 0.5, 0.75)) for a in range(3)])
    # jump targets: extent quantiles per axis, so a size can leave a basin
    # (e.g. a duplicated p25/p50) that no small step escapes
    qs = [k / ANCHOR_SCAN_QUANTILES for k in range(1, ANCHOR_SCAN_QUANTILES + 1)]
    scan = [sorted(set(nearest_rank_many(extents[:, a], qs))) for a in range(3)]
    best = anchor_objective(extents, sizes)
    trace = [best]
    step = ANCHOR_STEP

    def try_move(axis: int, j: int, value: float) -> bool:
        nonlocal sizes, best
        cand = sizes.copy()
        cand[axis, j] = value
        obj = anchor_objective(extents, cand)
        if obj > best:
            sizes, best = cand, obj
            return True
        return False

    for _ in range(iters):
        for axis in range(3):
            for j in range(3):
                for value in scan[axis]:
                    try_move(axis, j, value)
                for factor in (step, 1.0 / step):
                    for _ in range(MAX_LINE_STEPS):
                        if not try_move(axis, j, sizes[axis, j] * factor):
                            break
        sizes = np.sort(sizes, axis=1)
        trace.append(best)
        step = math.sqrt(step)

    return AnchorPlan(
        sizes_per_axis=tuple(tuple(float(v) for v in row) for row in sizes),
        objective_trace=tuple(trace),
        level0_stride=level0_stride,
        num_head_levels=num_head_levels,
    )


def build_plan(fp: DatasetFingerprint, train_extents_mm, voxel_budget: int = DEFAULT_VOXEL_BUDGET,
               seed: int = 0, anchor_iters: int = ANCHOR_SWEEPS) -> PipelinePlan:
    """Run every rule: spacing, topology, low-res trigger, anchors.

    ``train_extents_mm`` holds the world extents of the training-split boxes.
    """
    spacing = target_spacing(fp)
    topo = plan_topology(fp, voxel_budget, spacing)
    triggered = lowres_trigger(fp, topo)
    lowres = plan_topology(fp, voxel_budget, lowres_spacing(fp, spacing)) if triggered else None

    ext_mm = np.asarray(train_extents_mm, dtype=float).reshape(-1, 3)
    if len(ext_mm) == 0:
        raise PlanningError("anchor optimization requires objects in the training split")
    head_levels = max(1, min(MAX_HEAD_LEVELS, topo.num_levels - 1))
    anchors = optimize_anchors(ext_mm / np.asarray(spacing), anchor_iters, seed,
                               HEAD_LEVEL0_STRIDE, head_levels)
    return PipelinePlan(topo, anchors, triggered, lowres)
