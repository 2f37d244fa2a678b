"""Detection metrics: greedy matching, AP / mAP, FROC and CPM."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from detpipe.dataio import BoundingBox, boxes_to_array
from detpipe.matching import iou_matrix

FROC_THRESHOLDS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_IOU = 0.1


class Criterion(str, enum.Enum):
    IOU = "iou"
    CENTER_RADIUS = "center_radius"


@dataclass(frozen=True)
class PredictionRecord:
    case_id: str
    index: int
    class_id: int
    score: float
    gt_index: int | None
    iou: float

    @property
    def is_tp(self) -> bool:
        return self.gt_index is not None


@dataclass
class MatchResult:
    """Per-prediction outcome in descending score order plus per-case gt bookkeeping."""

    predictions: list[PredictionRecord]
    gt_matched: dict[str, list[bool]]
    gt_classes: dict[str, list[int]]
    num_pred: dict[str, int] = field(default_factory=dict)

    @property
    def case_ids(self) -> list[str]:
        return list(self.gt_matched)

    @property
    def num_cases(self) -> int:
        return len(self.gt_matched)

    def num_gt(self, class_id: int | None = None) -> int:
        return sum(1 for cls in self.gt_classes.values() for c in cls if class_id is None or c == class_id)

    def classes(self) -> list[int]:
        return sorted({c for cls in self.gt_classes.values() for c in cls}
                      | {p.class_id for p in self.predictions})


def _order(preds: Mapping[str, Sequence[BoundingBox]]) -> list[tuple[str, int, BoundingBox]]:
    flat = [(cid, i, b) for cid in sorted(preds) for i, b in enumerate(preds[cid])]
    # descending score; ties by case id then box index
    flat.sort(key=lambda t: (-(t[2].score if t[2].score is not None else 0.0), t[0], t[1]))
    return flat


def match_greedy(preds: Mapping[str, Sequence[BoundingBox]], gt: Mapping[str, Sequence[BoundingBox]],
                 iou_threshold: float = DEFAULT_IOU,
                 criterion: Criterion | str = Criterion.IOU,
                 spacing_mm: Mapping[str, Sequence[float]] | None = None) -> MatchResult:
    """Match predictions to ground truth in descending score order.

    With ``criterion="iou"`` a prediction takes the unmatched same-class gt of
    highest IoU at or above the threshold. With ``"center_radius"`` it takes
    the nearest unmatched same-class gt whose centre is closer than the gt
    radius (half its largest extent), measured in mm when ``spacing_mm`` is
    given and in voxels otherwise.
    """
    criterion = Criterion(criterion)
    case_ids = sorted(set(gt) | set(preds))
    gt_arr = {c: boxes_to_array(gt.get(c, ())) for c in case_ids}
    gt_cls = {c: [b.class_id for b in gt.get(c, ())] for c in case_ids}
    matched = {c: [False] * len(gt.get(c, ())) for c in case_ids}
    records = []
    for case_id, idx, box in _order(preds):
        g = gt_arr[case_id]
        best, best_val = None, 0.0
        if len(g):
            same = np.array([c == box.class_id for c in gt_cls[case_id]])
            free = same & ~np.array(matched[case_id])
            if criterion is Criterion.IOU:
                ious = iou_matrix(box.as_array()[None], g)[0]
                ok = free & (ious >= iou_threshold)
                if ok.any():
                    cand = np.flatnonzero(ok)
                    best = int(cand[np.argmax(ious[cand])])
                    best_val = float(ious[best])
            else:
                scale = np.asarray(spacing_mm[case_id] if spacing_mm else (1.0, 1.0, 1.0), dtype=float)
                pc = (box.as_array()[:3] + box.as_array()[3:]) / 2 * scale
                gc = (g[:, :3] + g[:, 3:]) / 2 * scale
                radius = np.max((g[:, 3:] - g[:, :3]) * scale, axis=1) / 2
                dist = np.linalg.norm(gc - pc, axis=1)
                ok = free & (dist < radius)
                if ok.any():
                    cand = np.flatnonzero(ok)
                    best = int(cand[np.argmin(dist[cand])])
                    best_val = float(iou_matrix(box.as_array()[None], g[best][None])[0, 0])
        if best is not None:
            matched[case_id][best] = True
        records.append(PredictionRecord(case_id, idx, box.class_id,
                                        float(box.score if box.score is not None else 0.0), best, best_val))
    return MatchResult(records, matched, gt_cls, {c: len(preds.get(c, ())) for c in case_ids})


def precision_recall(match: MatchResult, class_id: int | None = None):
    """Recall and precision after each prediction in score order, plus the gt count."""
    recs = [r for r in match.predictions if class_id is None or r.class_id == class_id]
    n_gt = match.num_gt(class_id)
    tp = np.cumsum([r.is_tp for r in recs]) if recs else np.zeros(0)
    k = np.arange(1, len(recs) + 1)
    return tp / max(n_gt, 1), tp / np.maximum(k, 1), n_gt


def average_precision(match: MatchResult, class_id: int | None = None) -> float:
    """All-points AP: sum of recall steps times the precision envelope.

    Returns NaN when the class has no ground truth.
    """
    recall, precision, n_gt = precision_recall(match, class_id)
    if n_gt == 0:
        return math.nan
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return math.fsum((recall - prev) * envelope)


def mean_average_precision(match: MatchResult, classes: Sequence[int] | None = None) -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class AP over classes that have ground truth."""
    classes = list(classes) if classes is not None else match.classes()
    per_class = {c: average_precision(match, c) for c in classes}
    defined = [v for v in per_class.values() if not math.isnan(v)]
    return (math.fsum(defined) / len(defined) if defined else math.nan), per_class


@dataclass
class FrocCurve:
    points: list[tuple[float, float]]
    sensitivities_at: dict[float, float]
    num_scans: int
    num_gt: int

    def to_dict(self) -> dict:
        return {
            "points": [list(p) for p in self.points],
            "sensitivities_at": {repr(float(k)): v for k, v in self.sensitivities_at.items()},
            "num_scans": self.num_scans,
            "num_gt": self.num_gt,
        }


def froc_curve(match: MatchResult, thresholds: Sequence[float] = FROC_THRESHOLDS,
               num_scans: int | None = None) -> FrocCurve:
    """FROC over all distinct score cuts, including the empty cut.

    Predictions sharing a score enter together. The sensitivity reported at a
    false-positive rate is that of the most permissive cut whose FP per scan
    does not exceed it.
    """
    n_gt = match.num_gt()
    if n_gt == 0:
        raise ValueError("FROC needs at least one ground-truth object")
    scans = num_scans if num_scans is not None else match.num_cases
    if scans <= 0:
        raise ValueError("FROC needs at least one scan")
    points = [(0.0, 0.0)]
    tp = fp = 0
    recs = match.predictions
    for i, r in enumerate(recs):
        tp += r.is_tp
        fp += not r.is_tp
        if i + 1 < len(recs) and recs[i + 1].score == r.score:
            continue
        points.append((fp / scans, tp / n_gt))
    sens = {}
    for t in thresholds:
        ok = [s for f, s in points if f <= t]
        sens[float(t)] = max(ok) if ok else 0.0
    return FrocCurve(points, sens, scans, n_gt)


def cpm(sensitivities: Sequence[float]) -> float:
    """Competition performance metric: mean sensitivity at the seven FP rates."""
    values = [float(v) for v in sensitivities]
    if len(values) != len(FROC_THRESHOLDS):
        raise ValueError(f"CPM needs {len(FROC_THRESHOLDS)} sensitivities, got {len(values)}")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("sensitivities must be in [0, 1]")
    return math.fsum(values) / len(values)


def evaluate(preds: Mapping[str, Sequence[BoundingBox]], gt: Mapping[str, Sequence[BoundingBox]],
             classes: Sequence[int] | None = None, iou_threshold: float = DEFAULT_IOU,
             criterion: Criterion | str = Criterion.IOU,
             spacing_mm: Mapping[str, Sequence[float]] | None = None) -> dict:
    """Everything that goes into metrics.json."""
    match = match_greedy(preds, gt, iou_threshold, criterion, spacing_mm)
    m_ap, per_class = mean_average_precision(match, classes)
    report = {
        "criterion": Criterion(criterion).value,
        "iou_threshold": iou_threshold,
        "num_cases": match.num_cases,
        "num_gt": match.num_gt(),
        "num_predictions": len(match.predictions),
        "num_true_positives": sum(r.is_tp for r in match.predictions),
        "per_class_ap": {str(c): (None if math.isnan(v) else v) for c, v in per_class.items()},
        "mAP": None if math.isnan(m_ap) else m_ap,
    }
    if match.num_gt() > 0:
        curve = froc_curve(match)
        report["froc"] = curve.to_dict()
        report["sensitivities_at"] = [curve.sensitivities_at[t] for t in FROC_THRESHOLDS]
        report["cpm"] = cpm(report["sensitivities_at"])
    else:
        report["froc"] = None
        report["sensitivities_at"] = None
        report["cpm"] = None
    return report


def map_at(preds: Mapping[str, Sequence[BoundingBox]], gt: Mapping[str, Sequence[BoundingBox]],
           classes: Sequence[int] | None = None, iou_threshold: float = DEFAULT_IOU) -> float:
    """mAP@``iou_threshold``; 0 when no class has ground truth."""
    m_ap, _ = mean_average_precision(match_greedy(preds, gt, iou_threshold), classes)
    return 0.0 if math.isnan(m_ap) else m_ap
