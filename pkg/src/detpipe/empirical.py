"""Sequential optimisation of test-time parameters on validation predictions.

Parameters start from a fixed initialisation and are optimised one at a
time in a fixed order; each step keeps the candidate with the best
validation objective, and keeps the current value on ties, so the
objective never decreases.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from detpipe.boxcluster import ConsolidationParams, PatchPredictions, consolidate_case
from detpipe.dataio import BoundingBox
from detpipe.metrics import map_at

log = logging.getLogger(__name__)

FULLRES = "fullres"
LOWRES = "lowres"
PARAMETER_ORDER = ("model_choice", "nms_iou", "wbc_iou", "min_score", "tta_enabled")
DEFAULT_GRIDS: dict[str, tuple] = {
    "model_choice": (FULLRES, LOWRES),
    "nms_iou": tuple(round(0.3 + 0.1 * i, 1) for i in range(7)),
    "wbc_iou": tuple(round(0.1 + 0.1 * i, 1) for i in range(7)),
    "min_score": (0.0, 0.05, 0.1, 0.2, 0.3),
    "tta_enabled": (True, False),
}
# gains below this are summation noise, not improvements
IMPROVEMENT_TOL = 1e-12


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalParams:
    nms_iou: float = 0.5
    wbc_iou: float = 0.3
    min_score: float = 0.0
    tta_enabled: bool = True
    model_choice: str = FULLRES

    def __post_init__(self):
        for name in ("nms_iou", "wbc_iou", "min_score"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.model_choice not in (FULLRES, LOWRES):
            raise ValueError(f"unknown model choice {self.model_choice!r}")

    def consolidation(self) -> ConsolidationParams:
        return ConsolidationParams(self.nms_iou, self.wbc_iou, self.min_score, self.tta_enabled)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmpiricalParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SweepReport:
    per_parameter: dict[str, list[tuple[object, float]]]
    chosen: EmpiricalParams
    objective_trace: list[float]
    initial: EmpiricalParams = field(default_factory=EmpiricalParams)

    @property
    def initial_objective(self) -> float:
        return self.objective_trace[0]

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict:
        return {
            "per_parameter": {k: [[v, o] for v, o in rows] for k, rows in self.per_parameter.items()},
            "chosen": self.chosen.to_dict(),
            "initial": self.initial.to_dict(),
            "objective_trace": list(self.objective_trace),
        }


def sequential_sweep(objective: Callable[[object], float], init, grids: Mapping[str, Sequence],
                     order: Sequence[str], decide: Mapping[str, Callable] | None = None):
    """Generic one-parameter-at-a-time search over a dataclass of parameters.

    Candidates are evaluated in list order and the current value is always
    evaluated too, so a step can never lose ground. By default a candidate
    replaces the current value only when better by more than
    ``IMPROVEMENT_TOL``; ``decide[name]``
    may override that with a function of ``(rows, current_value)``.
    Returns ``(best_params, per_parameter, trace)``.
    """
    cache: dict = {}

    def score(p) -> float:
        key = repr(p)
        if key not in cache:
            cache[key] = float(objective(p))
        return cache[key]

    decide = decide or {}
    current = init
    trace = [score(current)]
    per_parameter: dict[str, list] = {}
    for name in order:
        cur_value = getattr(current, name)
        candidates = list(grids.get(name, ()))
        if cur_value not in candidates:
            candidates.insert(0, cur_value)
        rows = [(v, score(dataclasses.replace(current, **{name: v}))) for v in candidates]
        if name in decide:
            chosen = decide[name](rows, cur_value)
        else:
            chosen, best = cur_value, dict(rows)[cur_value]
            for v, s in rows:
                if s > best + IMPROVEMENT_TOL:
                    chosen, best = v, s
        per_parameter[name] = rows
        current = dataclasses.replace(current, **{name: chosen})
        trace.append(score(current))
        log.info("sweep %s -> %r (objective %.4f)", name, chosen, trace[-1])
    return current, per_parameter, trace


def select_model(val_fullres: float, val_lowres: float | None = None) -> str:
    """Low resolution wins only with a strictly better validation score."""
    if val_lowres is not None and val_lowres > val_fullres + IMPROVEMENT_TOL:
        return LOWRES
    return FULLRES


@dataclass
class ValidationSet:
    """Raw patch predictions of validation cases plus ground truth.

    ``predictions`` maps a model choice (fullres / lowres) to per-case raw
    predictions; ``models`` optionally restricts each case to the model ids
    that may vote on it (the out-of-fold model in cross-validation).
    """

    predictions: Mapping[str, Mapping[str, PatchPredictions]]
    gt: Mapping[str, Sequence[BoundingBox]]
    models: Mapping[str, Sequence[int]] | None = None
    classes: Sequence[int] | None = None

    def consolidate(self, params: EmpiricalParams) -> dict[str, list[BoundingBox]]:
        per_case = self.predictions[params.model_choice]
        cons = params.consolidation()
        out = {}
        for case_id in sorted(self.gt):
            preds = per_case.get(case_id)
            models = self.models.get(case_id) if self.models else None
            out[case_id] = consolidate_case(preds, cons, models) if preds is not None else []
        return out

    def objective(self, params: EmpiricalParams) -> float:
        return map_at(self.consolidate(params), self.gt, self.classes)


def sweep_sequential(val: ValidationSet, grids: Mapping[str, Sequence] | None = None,
                     order: Sequence[str] = PARAMETER_ORDER,
                     init: EmpiricalParams | None = None) -> SweepReport:
    """Optimise empirical parameters in ``order`` for validation mAP@0.1."""
    if not val.gt:
        raise SweepError("empty validation set")
    if FULLRES not in val.predictions:
        raise SweepError("validation predictions of the full-resolution model are required")
    init = init or EmpiricalParams()
    grids = dict(DEFAULT_GRIDS if grids is None else grids)
    if "model_choice" in grids:
        grids["model_choice"] = tuple(m for m in grids["model_choice"] if m in val.predictions)

    def choose_model(rows, current):
        scores = dict(rows)
        return select_model(scores[FULLRES], scores.get(LOWRES))

    chosen, per_parameter, trace = sequential_sweep(
        val.objective, init, grids, order, {"model_choice": choose_model}
    )
    return SweepReport(per_parameter, chosen, trace, init)


def apply_params(predictions: Mapping[str, PatchPredictions], params: EmpiricalParams,
                 models: Mapping[str, Sequence[int]] | None = None) -> dict[str, list[BoundingBox]]:
    cons = params.consolidation()
    return {cid: consolidate_case(p, cons, models.get(cid) if models else None)
            for cid, p in sorted(predictions.items())}

