"""Adaptive training sample selection (ATSS) without the centre-inside rule.

Used to validate anchor plans: for every ground-truth box, the k anchors
nearest to its centre are collected on each pyramid level, and the ones
whose IoU reaches mean + std of the candidate IoUs become positives. The
original rule additionally required the anchor centre to lie inside the
box; that filter is dropped because it empties the positive set of small
objects.

Anchor ids enumerate level first, then grid position (x fastest), then the
anchor size index within the position.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from detpipe.dataio import BoundingBox, boxes_to_array
from detpipe.planner import AnchorPlan

log = logging.getLogger(__name__)

ANCHORS_PER_POSITION = 27


@dataclass(frozen=True)
class MatchParams:
    k: int = 9
    center_inside_required: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.center_inside_required:
            raise ValueError("the centre-inside requirement is not supported")


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    patch_size: tuple[int, int, int]
    level_strides: tuple[int, ...]
    level_sizes: tuple[np.ndarray, ...]
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if len(self.level_strides) != len(self.level_sizes) or not self.level_strides:
            raise ValueError("need one size table per level and at least one level")
        sizes = tuple(np.asarray(s, dtype=float).reshape(-1, 3) for s in self.level_sizes)
        for stride, s in zip(self.level_strides, sizes):
            if stride < 1 or stride > min(self.patch_size):
                raise ValueError(f"stride {stride} does not fit patch {self.patch_size}")
            if len(s) != ANCHORS_PER_POSITION:
                raise ValueError(f"{ANCHORS_PER_POSITION} anchors per position required, got {len(s)}")
            if np.any(s <= 0):
                raise ValueError("anchor sizes must be positive")
        object.__setattr__(self, "level_sizes", sizes)

    @classmethod
    def from_plan(cls, plan: AnchorPlan, patch_size: Sequence[int]) -> "AnchorGrid":
        strides, sizes = [], []
        for level in range(plan.num_head_levels):
            stride = plan.level0_stride * 2 ** level
            if stride > min(patch_size):
                break
            strides.append(stride)
            sizes.append(plan.level_sizes(level))
        if not strides:
            strides, sizes = [1], [plan.level_sizes(0)]
        return cls(tuple(int(p) for p in patch_size), tuple(strides), tuple(sizes))

    def positions(self, level: int) -> tuple[int, int, int]:
        s = self.level_strides[level]
        return tuple(p // s for p in self.patch_size)

    def axis_centers(self, level: int) -> list[np.ndarray]:
        s = self.level_strides[level]
        return [self.origin[a] + s * (np.arange(n) + 0.5) for a, n in enumerate(self.positions(level))]

    def level_offsets(self) -> list[int]:
        offsets, total = [], 0
        for level in range(len(self.level_strides)):
            offsets.append(total)
            total += math.prod(self.positions(level)) * len(self.level_sizes[level])
        offsets.append(total)
        return offsets

    @property
    def num_anchors(self) -> int:
        return self.level_offsets()[-1]

    def anchor(self, anchor_id: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Centre, size and level of one anchor."""
        offsets = self.level_offsets()
        level = int(np.searchsorted(offsets, anchor_id, side="right") - 1)
        local = anchor_id - offsets[level]
        n_sizes = len(self.level_sizes[level])
        pos, size_idx = divmod(local, n_sizes)
        nx, ny, _ = self.positions(level)
        idx = (pos % nx, (pos // nx) % ny, pos // (nx * ny))
        axes = self.axis_centers(level)
        center = np.array([axes[a][idx[a]] for a in range(3)])
        return center, self.level_sizes[level][size_idx], level


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=float).reshape(-1, 6)
    return boxes_to_array(boxes)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU in voxel volume between two box lists (or ``(N, 6)`` arrays)."""
    a, b = _as_array(a), _as_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    vol_a = np.prod(a[:, 3:] - a[:, :3], axis=-1)
    vol_b = np.prod(b[:, 3:] - b[:, :3], axis=-1)
    return inter / (vol_a[:, None] + vol_b[None, :] - inter)


def _centered_iou(centers: np.ndarray, sizes: np.ndarray, gt_center: np.ndarray,
                  gt_size: np.ndarray) -> np.ndarray:
    # centre/half-size form keeps the result exact under integer translation
    half_a, half_g = sizes / 2, gt_size / 2
    dist = np.abs(centers - gt_center)
    overlap = np.minimum(half_a + half_g - dist, 2 * np.minimum(half_a, half_g))
    inter = np.prod(np.clip(overlap, 0, None), axis=-1)
    union = np.prod(sizes, axis=-1) + np.prod(gt_size) - inter
    return inter / union


def atss_threshold(ious: Iterable[float]) -> float:
    """mean + population std, with an exact value when all IoUs are equal."""
    values = [float(v) for v in ious]
    if not values:
        return math.inf
    if all(v == values[0] for v in values):
        return values[0]
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean + math.sqrt(var)


def atss_positive_mask(ious: Sequence[float]) -> np.ndarray:
    """``iou >= mean + std`` decided in exact rational arithmetic.

    Floating point can put mean + std one ulp above the largest IoU (two
    IoU values in equal numbers, say) and leave a box without positives.
    Exactly, ``v >= mean + std`` iff ``v - mean >= 0`` and
    ``(v - mean)**2 >= var``.
    """
    values = [Fraction(float(v)) for v in ious]
    if not values:
        return np.zeros(0, dtype=bool)
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return np.array([v - mean >= 0 and (v - mean) ** 2 >= var for v in values], dtype=bool)


def _level_candidates(grid: AnchorGrid, level: int, gt_center: np.ndarray, k: int,
                      offset: int) -> np.ndarray:
    """Ids of the k anchors of one level nearest to ``gt_center`` (ties: lower id)."""
    n_sizes = len(grid.level_sizes[level])
    axes = grid.axis_centers(level)
    d2 = [(axes[a] - gt_center[a]) ** 2 for a in range(3)]
    # x fastest: flat position index = ix + nx * (iy + ny * iz)
    dist = (d2[2][:, None, None] + d2[1][None, :, None] + d2[0][None, None, :]).ravel()
    n_pos = min(len(dist), -(-k // n_sizes))
    if n_pos < len(dist):
        cutoff = np.partition(dist, n_pos - 1)[n_pos - 1]
        pool = np.flatnonzero(dist <= cutoff)
    else:
        pool = np.arange(len(dist))
    pool = pool[np.lexsort((pool, dist[pool]))][:n_pos]
    ids = offset + (pool[:, None] * n_sizes + np.arange(n_sizes)[None, :]).ravel()
    return ids[:k]


def atss_match(gt, grid: AnchorGrid, params: MatchParams | None = None) -> dict[int, frozenset[int]]:
    """Positive anchor ids per ground-truth index."""
    params = params or MatchParams()
    gt = _as_array(gt)
    offsets = grid.level_offsets()
    result: dict[int, frozenset[int]] = {}
    for g, box in enumerate(gt):
        gc, gs = (box[:3] + box[3:]) / 2, box[3:] - box[:3]
        cand = np.concatenate([
            _level_candidates(grid, level, gc, params.k, offsets[level])
            for level in range(len(grid.level_strides))
        ])
        centers = np.empty((len(cand), 3))
        sizes = np.empty((len(cand), 3))
        for i, aid in enumerate(cand):
            centers[i], sizes[i], _ = grid.anchor(int(aid))
        ious = _centered_iou(centers, sizes, gc, gs)
        positives = frozenset(int(a) for a in cand[atss_positive_mask(ious)])
        if not positives:
            log.debug("ground truth %d received no positive anchor", g)
        result[g] = positives
    return result


def anchor_coverage_report(boxes: Sequence[BoundingBox] | Mapping[int, np.ndarray],
                           plan: AnchorPlan, patch_size: Sequence[int],
                           params: MatchParams | None = None) -> dict:
    """Fraction of ground-truth boxes per class that receive at least one positive anchor.

    Only box size matters here: each box is re-centred in the middle of the patch.
    ``boxes`` is a list of boxes (sizes at target spacing) or a mapping
    ``class_id -> (N, 3)`` array of extents.
    """
    if isinstance(boxes, Mapping):
        per_class = {int(c): np.asarray(e, dtype=float).reshape(-1, 3) for c, e in boxes.items()}
    else:
        per_class = {}
        for b in boxes:
            per_class.setdefault(b.class_id, []).append(b.extent)
        per_class = {c: np.array(e, dtype=float) for c, e in per_class.items()}

    grid = AnchorGrid.from_plan(plan, patch_size)
    mid = np.asarray(patch_size, dtype=float) / 2
    report = {}
    for cls in sorted(per_class):
        ext = per_class[cls]
        if len(ext) == 0:
            continue
        gt = np.concatenate([mid - ext / 2, mid + ext / 2], axis=1)
        matches = atss_match(gt, grid, params)
        covered = sum(1 for v in matches.values() if v)
        report[str(cls)] = {
            "num_boxes": len(ext),
            "covered": covered,
            "fraction_with_positive": covered / len(ext),
        }
    return {"per_class": report, "level_strides": list(grid.level_strides), "k": (params or MatchParams()).k}
