"""Test-time box consolidation for sliding-window inference.

Predictions of one model are gathered over overlapping patches, weighted by
how central they were inside their patch and de-duplicated with NMS. The
surviving boxes of all models (folds) and test-time augmentations are then
merged with weighted box clustering (WBC).

Boxes are handled as ``(N, 6)`` float arrays ``[x0, y0, z0, x1, y1, z1]``
in global voxel coordinates, half-open.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from detpipe.dataio import BoundingBox

CENTER_WEIGHT_FLOOR = 0.1
DEFAULT_OVERLAP = 0.5
# above this many boxes NMS avoids the n x n IoU matrix
NMS_DENSE_LIMIT = 4096


class ConsolidationError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    dims: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]
    overlap_fraction: float = DEFAULT_OVERLAP

    def patch_box(self, patch_id: int) -> np.ndarray:
        o = np.asarray(self.origins[patch_id], dtype=float)
        return np.concatenate([o, o + np.asarray(self.patch_size, dtype=float)])

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "patch_size": list(self.patch_size),
            "origins": [list(o) for o in self.origins],
            "overlap_fraction": self.overlap_fraction,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatchGrid":
        return cls(tuple(d["dims"]), tuple(d["patch_size"]),
                   tuple(tuple(int(v) for v in o) for o in d["origins"]),
                   float(d.get("overlap_fraction", DEFAULT_OVERLAP)))


def axis_starts(dim: int, patch: int, overlap: float) -> list[int]:
    if dim <= patch:
        return [0]
    stride = max(1, int(math.floor(patch * (1.0 - overlap))))
    starts, o = [], 0
    while o + patch < dim:
        starts.append(o)
        o += stride
    starts.append(dim - patch)
    return starts


def tile_patches(dims: Sequence[int], patch_size: Sequence[int], overlap: float = DEFAULT_OVERLAP) -> PatchGrid:
    """Overlapping patch origins covering a volume; patch ids are x-fastest.

    Axes shorter than the patch are treated as zero-padded up to the patch size.
    """
    dims = tuple(int(d) for d in dims)
    patch_size = tuple(int(p) for p in patch_size)
    if min(patch_size) < 1:
        raise ConsolidationError(f"patch size must be positive, got {patch_size}")
    if not 0.0 <= overlap < 1.0:
        raise ConsolidationError(f"overlap must be in [0, 1), got {overlap}")
    starts = [axis_starts(d, p, overlap) for d, p in zip(dims, patch_size)]
    origins = tuple((x, y, z) for z, y, x in itertools.product(starts[2], starts[1], starts[0]))
    return PatchGrid(dims, patch_size, origins, overlap)


def patch_center_weight(box_center: Sequence[float], patch_origin: Sequence[int],
                        patch_size: Sequence[int]) -> float:
    """Separable triangular window, 1 at the patch midpoint and floored at 0.1."""
    weight = 1.0
    for c, o, p in zip(box_center, patch_origin, patch_size):
        if not o <= c <= o + p:
            raise ConsolidationError(f"box centre {tuple(box_center)} outside patch at {tuple(patch_origin)}")
        w = 1.0 - abs(c - (o + p / 2)) / (p / 2)
        weight *= min(1.0, max(CENTER_WEIGHT_FLOOR, w))
    return weight


def center_weights(boxes: np.ndarray, origins: np.ndarray, patch_size: Sequence[int]) -> np.ndarray:
    """Vectorised :func:`patch_center_weight`; centres are clipped into their patch."""
    size = np.asarray(patch_size, dtype=float)
    centers = np.clip((boxes[:, :3] + boxes[:, 3:]) / 2, origins, origins + size)
    w = 1.0 - np.abs(centers - (origins + size / 2)) / (size / 2)
    return np.prod(np.clip(w, CENTER_WEIGHT_FLOOR, 1.0), axis=1)


def _iou_one(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    lo = np.maximum(box[:3], boxes[:, :3])
    hi = np.minimum(box[3:], boxes[:, 3:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=1)
    union = np.prod(box[3:] - box[:3]) + np.prod(boxes[:, 3:] - boxes[:, :3], axis=1) - inter
    return inter / union


def _rank(keys: np.ndarray) -> np.ndarray:
    """Indices by descending key; equal keys keep ascending index order."""
    return np.lexsort((np.arange(len(keys)), -np.asarray(keys, dtype=float)))


def _pairwise_iou(boxes: np.ndarray) -> np.ndarray:
    inter = None
    for a in range(3):
        d = np.minimum.outer(boxes[:, a + 3], boxes[:, a + 3])
        d -= np.maximum.outer(boxes[:, a], boxes[:, a])
        np.maximum(d, 0.0, out=d)
        if inter is None:
            inter = d
        else:
            inter *= d
    vol = np.prod(boxes[:, 3:] - boxes[:, :3], axis=1)
    union = np.add.outer(vol, vol)
    union -= inter
    inter /= union
    return inter


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by descending score.

    A box is discarded when its IoU with an already kept box exceeds
    ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    order = _rank(scores)
    if len(order) <= NMS_DENSE_LIMIT:
        # one matrix of suppressions, then a cheap boolean pass; clearing
        # flags of already visited rows is harmless
        over = _pairwise_iou(boxes[order]) > iou_threshold
        alive = np.ones(len(order), dtype=bool)
        keep = []
        for i in range(len(order)):
            if alive[i]:
                keep.append(order[i])
                alive &= ~over[i]
        return np.asarray(keep, dtype=int)
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ordered = boxes[order]
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if len(rest):
            alive[rest[_iou_one(ordered[i], ordered[rest]) > iou_threshold]] = False
    return np.asarray(keep, dtype=int)


def weighted_box_clustering(boxes: np.ndarray, scores: np.ndarray, weights: np.ndarray,
                            iou_threshold: float, expected_sources: int):
    """Merge overlapping detections from several sources.

    The highest-scoring unassigned detection seeds a cluster and takes every
    unassigned detection with IoU above the threshold. Members are weighted by
    ``patch_weight * IoU(seed, member)``; the merged score is the weighted mean
    score times ``min(1, members / expected_sources)``.

    Returns ``(boxes, scores, cluster_sizes)`` in seed order.
    """
    if expected_sources < 1:
        raise ConsolidationError("expected_sources must be >= 1")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = _rank(scores)
    unassigned = np.ones(len(boxes), dtype=bool)
    out_boxes, out_scores, sizes = [], [], []
    for seed in order:
        if not unassigned[seed]:
            continue
        cand = np.flatnonzero(unassigned)
        iou = _iou_one(boxes[seed], boxes[cand])
        iou[cand == seed] = 1.0
        members = cand[iou > iou_threshold]
        member_iou = iou[iou > iou_threshold]
        unassigned[members] = False
        w = weights[members] * member_iou
        total = w.sum()
        out_boxes.append((w[:, None] * boxes[members]).sum(axis=0) / total)
        score = float((w * scores[members]).sum() / total)
        out_scores.append(score * min(1.0, len(members) / expected_sources))
        sizes.append(len(members))
    if not out_boxes:
        return np.zeros((0, 6)), np.zeros(0), np.zeros(0, dtype=int)
    return np.stack(out_boxes), np.asarray(out_scores), np.asarray(sizes, dtype=int)


@dataclass
class PatchPredictions:
    """Raw detections of one case, tagged with their source (model, patch, tta)."""

    case_id: str
    grid: PatchGrid
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    model: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    patch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    tta: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    # number of models / TTA variants that voted; 0 means infer from the ids present
    num_models: int = 0
    num_tta: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 6)
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        for name in ("classes", "model", "patch", "tta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=int).ravel())
        n = len(self.boxes)
        if any(len(getattr(self, k)) != n for k in ("scores", "classes", "model", "patch", "tta")):
            raise ConsolidationError("prediction arrays differ in length")

    def __len__(self) -> int:
        return len(self.boxes)

    def select(self, mask: np.ndarray) -> "PatchPredictions":
        return PatchPredictions(self.case_id, self.grid, self.boxes[mask], self.scores[mask],
                                self.classes[mask], self.model[mask], self.patch[mask], self.tta[mask],
                                self.num_models, self.num_tta)

    @classmethod
    def concat(cls, parts: Sequence["PatchPredictions"]) -> "PatchPredictions":
        if not parts:
            raise ConsolidationError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.grid != first.grid or p.case_id != first.case_id:
                raise ConsolidationError("inconsistent grids across models")
        return cls(first.case_id, first.grid,
                   np.concatenate([p.boxes for p in parts]),
                   np.concatenate([p.scores for p in parts]),
                   np.concatenate([p.classes for p in parts]),
                   np.concatenate([p.model for p in parts]),
                   np.concatenate([p.patch for p in parts]),
                   np.concatenate([p.tta for p in parts]),
                   max(p.num_models for p in parts), max(p.num_tta for p in parts))

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "grid": self.grid.to_dict(),
            "num_models": self.num_models,
            "num_tta": self.num_tta,
            "detections": [
                {"min": b[:3].tolist(), "max": b[3:].tolist(), "class_id": int(c), "score": float(s),
                 "model": int(m), "patch": int(p), "tta": int(t)}
                for b, s, c, m, p, t in zip(self.boxes, self.scores, self.classes,
                                            self.model, self.patch, self.tta)
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatchPredictions":
        dets = d.get("detections", [])
        return cls(
            str(d["case_id"]),
            PatchGrid.from_dict(d["grid"]),
            np.array([[*e["min"], *e["max"]] for e in dets], dtype=float).reshape(-1, 6),
            np.array([e["score"] for e in dets], dtype=float),
            np.array([e.get("class_id", 0) for e in dets], dtype=int),
            np.array([e.get("model", 0) for e in dets], dtype=int),
            np.array([e.get("patch", 0) for e in dets], dtype=int),
            np.array([e.get("tta", 0) for e in dets], dtype=int),
            int(d.get("num_models", 0)),
            int(d.get("num_tta", 0)),
        )


@dataclass(frozen=True)
class ConsolidationParams:
    nms_iou: float = 0.5
    wbc_iou: float = 0.3
    min_score: float = 0.0
    tta_enabled: bool = True
    drop_truncated: bool = True


def _inner_face_contacts(boxes: np.ndarray, origins: np.ndarray, size: np.ndarray, dims: np.ndarray,
                        eps: float) -> np.ndarray:
    """``[i, j, side]``: box i reaches face ``side`` of patch j and that face lies inside the volume.

    Sides are ordered ``x-, y-, z-, x+, y+, z+``.
    """
    lower = (boxes[:, None, :3] <= origins[None] + eps) & (origins[None] > 0)
    upper = (boxes[:, None, 3:] >= origins[None] + size - eps) & (origins[None] + size < dims)
    return np.concatenate([lower, upper], axis=-1)


def truncated_mask(preds: PatchPredictions, eps: float = 1e-6) -> np.ndarray:
    """Detections that are cut-off views of what another patch sees more completely.

    A box touching an inner face of its patch (a face not on the volume
    boundary) may have been cut there. It is dropped when another patch
    contains it while touching a strict subset of those faces: that patch
    saw past the cut.
    """
    grid = preds.grid
    if len(preds) == 0:
        return np.zeros(0, dtype=bool)
    origins = np.asarray(grid.origins, dtype=float)
    size = np.asarray(grid.patch_size, dtype=float)
    dims = np.maximum(np.asarray(grid.dims, dtype=float), size)
    contacts = _inner_face_contacts(preds.boxes, origins, size, dims, eps)
    own = contacts[np.arange(len(preds)), preds.patch]
    contained = np.all((preds.boxes[:, None, :3] >= origins[None] - eps)
                       & (preds.boxes[:, None, 3:] <= origins[None] + size + eps), axis=-1)
    subset = np.all(~contacts | own[:, None, :], axis=-1)
    fewer = contacts.sum(axis=-1) < own.sum(axis=-1)[:, None]
    return np.any(contained & subset & fewer, axis=1)


def _canonical(preds: PatchPredictions, idx: np.ndarray) -> np.ndarray:
    # input order must not matter: sort by source, then geometry and score
    keys = [preds.scores[idx]] + [preds.boxes[idx, k] for k in range(5, -1, -1)]
    keys += [preds.patch[idx], preds.tta[idx], preds.model[idx]]
    return idx[np.lexsort(keys)]


def consolidate_case(preds: PatchPredictions, params: ConsolidationParams | None = None,
                     models: Sequence[int] | None = None) -> list[BoundingBox]:
    """Inter-patch NMS per model and class, then WBC across models and TTA.

    ``models`` restricts which model ids take part (e.g. the out-of-fold
    model for validation cases); default is every model present.
    """
    params = params or ConsolidationParams()
    if models is not None:
        preds = preds.select(np.isin(preds.model, np.asarray(list(models), dtype=int)))
    if not params.tta_enabled:
        preds = preds.select(preds.tta == 0)
    if len(preds) == 0:
        return []
    n_models = len(models) if models is not None else (preds.num_models or len(np.unique(preds.model)))
    n_tta = (preds.num_tta or len(np.unique(preds.tta))) if params.tta_enabled else 1
    n_sources = n_models * n_tta

    grid = preds.grid
    origins = np.asarray(grid.origins, dtype=float)[preds.patch]
    weights = center_weights(preds.boxes, origins, grid.patch_size)
    usable = ~truncated_mask(preds) if params.drop_truncated else np.ones(len(preds), dtype=bool)

    survivors = []
    for m, t, c in sorted({(int(m), int(t), int(c)) for m, t, c in zip(preds.model, preds.tta, preds.classes)}):
        idx = np.flatnonzero((preds.model == m) & (preds.tta == t) & (preds.classes == c) & usable)
        if len(idx) == 0:
            continue
        idx = _canonical(preds, idx)
        kept = nms(preds.boxes[idx], preds.scores[idx] * weights[idx], params.nms_iou)
        survivors.append(idx[kept])
    if not survivors:
        return []
    survivors = np.concatenate(survivors)

    results = []
    for c in sorted({int(v) for v in preds.classes[survivors]}):
        idx = _canonical(preds, survivors[preds.classes[survivors] == c])
        boxes, scores, _ = weighted_box_clustering(
            preds.boxes[idx], preds.scores[idx], weights[idx], params.wbc_iou, n_sources
        )
        for b, s in zip(boxes, scores):
            if s >= params.min_score:
                results.append(BoundingBox(tuple(b[:3]), tuple(b[3:]), c, min(1.0, max(0.0, float(s)))))
    results.sort(key=lambda b: (-b.score, b.class_id, b.min, b.max))
    return results
