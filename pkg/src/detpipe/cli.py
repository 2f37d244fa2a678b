"""Command-line driver for the staged detection pipeline.

Stages read and write plain JSON artifacts in a flat work directory::

    fingerprint   fingerprint.json
    plan          plan.json, anchor_coverage.json
    simulate      raw_predictions/<case>.json (+ raw_predictions_lowres/)
    sweep         sweep.json, empirical_params.json, sweep.csv, figures/sweep.png
    consolidate   predictions/<case>.json
    evaluate      metrics.json, froc.csv, pr.csv, figures/froc.png, figures/pr.png
    convert-labels  converted/ (a dataset with boxes re-derived from label maps)
    baseline      predictions/<case>.json, baseline.json (segmentation baseline)

Development cases (splits train and val) are split into folds by a hash of
(seed, case id). Each development case is predicted by its out-of-fold model
only; test cases get the ensemble of all fold models.

Exit codes: 0 success, 2 invalid input, 3 missing prerequisite, 4 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import hashlib
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from detpipe.boxcluster import DEFAULT_OVERLAP, PatchPredictions, consolidate_case
from detpipe.dataio import (
    BoundingBox,
    Case,
    Dataset,
    DatasetError,
    load_dataset,
    load_softmax,
    read_boxes,
    read_json_artifact,
    write_boxes,
    write_dataset_json,
    write_json_artifact,
    write_volume,
)
from detpipe.empirical import (
    FULLRES,
    LOWRES,
    EmpiricalParams,
    SweepError,
    ValidationSet,
    sequential_sweep,
    sweep_sequential,
)
from detpipe.fingerprint import DatasetFingerprint, case_fingerprint, dataset_fingerprint
from detpipe.matching import anchor_coverage_report
from detpipe.metrics import (
    Criterion,
    FROC_THRESHOLDS,
    average_precision,
    evaluate,
    map_at,
    match_greedy,
    precision_recall,
)
from detpipe.planner import DEFAULT_VOXEL_BUDGET, PipelinePlan, TopologyPlan, build_plan
from detpipe.seg2det import MIN_DIAMETER_MM, Aggregation, SegPostParams, instances_from_softmax, labelmap_to_objects
from detpipe.synth import OracleNoise, simulate_case
from detpipe import plotting

log = logging.getLogger("detpipe")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_MISSING = 3
EXIT_INTERNAL = 4

STAGES = ("fingerprint", "plan", "convert-labels", "baseline", "simulate", "consolidate", "sweep",
          "evaluate", "all")
ALL_CHAIN = ("fingerprint", "plan", "simulate", "sweep", "consolidate", "evaluate")

FINGERPRINT_JSON = "fingerprint.json"
PLAN_JSON = "plan.json"
COVERAGE_JSON = "anchor_coverage.json"
RAW_DIR = "raw_predictions"
RAW_LOWRES_DIR = "raw_predictions_lowres"
SWEEP_JSON = "sweep.json"
PARAMS_JSON = "empirical_params.json"
PRED_DIR = "predictions"
METRICS_JSON = "metrics.json"
BASELINE_JSON = "baseline.json"
CONVERTED_DIR = "converted"
# low-res oracle draws from its own stream
LOWRES_SEED_OFFSET = 1

BASELINE_GRIDS = {
    "softmax_threshold": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    "min_voxels": (0, 5, 10, 20, 50),
    "aggregation": tuple(Aggregation),
}
BASELINE_ORDER = ("softmax_threshold", "min_voxels", "aggregation")


class MissingArtifactError(Exception):
    """A stage ran before the stage that produces its input."""

    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        msg = f"missing prerequisite artifact: {artifact}"
        super().__init__(f"{msg} ({hint})" if hint else msg)


@dataclass(frozen=True)
class RunConfig:
    dataset_root: Path
    workdir: Path
    folds: int = 5
    seed: int = 0
    jobs: int = 1
    voxel_budget: int = DEFAULT_VOXEL_BUDGET
    overlap: float = DEFAULT_OVERLAP
    min_diameter_mm: float = MIN_DIAMETER_MM
    criterion: str = Criterion.IOU.value
    iou_threshold: float = 0.1
    num_tta: int = 2
    anchor_iters: int = 3
    noise: OracleNoise = field(default_factory=lambda: OracleNoise(1.0, 0.0, 0.5, drop_rate=0.1))
    baseline_variant: str = "plus"
    softmax_root: Path | None = None

    def __post_init__(self):
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must be in [0, 1)")
        if self.num_tta < 1:
            raise ValueError("tta count must be >= 1")
        if self.voxel_budget < 64:
            raise ValueError("voxel budget must be at least 64 voxels")
        if self.baseline_variant not in ("basic", "plus"):
            raise ValueError("baseline variant must be basic or plus")
        Criterion(self.criterion)

    def path(self, *parts: str) -> Path:
        return Path(self.workdir).joinpath(*parts)


def fold_of(seed: int, case_id: str, folds: int) -> int:
    """Stable fold index from a hash of (seed, case id)."""
    digest = hashlib.sha256(f"{int(seed)}:{case_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % folds


def fold_assignment(dataset: Dataset, seed: int, folds: int) -> dict[str, int | None]:
    """Fold per development case; ``None`` for test cases (ensemble of all folds)."""
    return {c.id: (None if c.split == "test" else fold_of(seed, c.id, folds)) for c in dataset.cases}


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _require(path: Path, name: str | None = None, hint: str = "") -> Path:
    if not path.exists():
        raise MissingArtifactError(name or path.name, hint)
    return path


def _dataset(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.dataset_root)


def _dev_cases(ds: Dataset) -> list[Case]:
    return [c for c in ds.cases if c.split != "test"]


def _gt(cases: Sequence[Case]) -> dict[str, list[BoundingBox]]:
    return {c.id: list(c.objects) for c in cases}


def _write_boxes_dir(folder: Path, preds: dict[str, list[BoundingBox]]) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for cid, boxes in sorted(preds.items()):
        write_boxes(folder / f"{cid}.json", boxes)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_fingerprint(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    cases = _dev_cases(ds)
    if not cases:
        raise DatasetError("the dataset has no train or val cases to fingerprint")
    stats = _parallel_map(case_fingerprint, cases, cfg.jobs)
    fp = dataset_fingerprint(stats, len(ds.classes))
    write_json_artifact(fp, cfg.path(FINGERPRINT_JSON))
    log.info("fingerprint of %d cases written", len(cases))


def _load_fingerprint(cfg: RunConfig) -> DatasetFingerprint:
    path = _require(cfg.path(FINGERPRINT_JSON), hint="run the fingerprint stage")
    return DatasetFingerprint.from_dict(read_json_artifact(path))


def _load_plan(cfg: RunConfig) -> PipelinePlan:
    path = _require(cfg.path(PLAN_JSON), hint="run the plan stage")
    return PipelinePlan.from_dict(read_json_artifact(path))


def stage_plan(cfg: RunConfig) -> None:
    fp = _load_fingerprint(cfg)
    ds = _dataset(cfg)
    train = [c for c in ds.cases if c.split == "train"] or _dev_cases(ds)
    extents, classes = [], []
    for case in train:
        for b in case.objects:
            extents.append(b.extent_mm(case.spacing_mm))
            classes.append(b.class_id)
    plan = build_plan(fp, extents, cfg.voxel_budget, cfg.seed, cfg.anchor_iters)
    write_json_artifact(plan, cfg.path(PLAN_JSON))

    spacing = np.asarray(plan.topology.target_spacing_mm)
    ext = np.asarray(extents, dtype=float).reshape(-1, 3) / spacing
    per_class = {c: ext[np.asarray(classes) == c] for c in sorted(set(classes))}
    coverage = anchor_coverage_report(per_class, plan.anchors, plan.topology.patch_size)
    write_json_artifact(coverage, cfg.path(COVERAGE_JSON))
    log.info("plan: patch %s, lowres %s", plan.topology.patch_size, plan.lowres_triggered)


def case_patch_size(case: Case, topo: TopologyPlan) -> tuple[int, int, int]:
    """Patch size of ``topo`` expressed in the case's own voxels, capped at the case shape."""
    scale = np.asarray(topo.target_spacing_mm) / np.asarray(case.spacing_mm)
    size = np.maximum(1, np.round(np.asarray(topo.patch_size) * scale)).astype(int)
    return tuple(int(v) for v in np.minimum(size, case.image.dims))


def _simulate_one(case: Case, topo: TopologyPlan, cfg: RunConfig, seed: int, num_classes: int) -> dict:
    preds = simulate_case(case, case_patch_size(case, topo), cfg.noise, cfg.folds, cfg.num_tta,
                          seed, cfg.overlap, num_classes)
    return preds.to_dict()


def stage_simulate(cfg: RunConfig) -> None:
    """Oracle predictions from every fold model standing in for trained networks."""
    plan = _load_plan(cfg)
    ds = _dataset(cfg)
    runs = [(RAW_DIR, plan.topology, cfg.seed)]
    if plan.lowres_triggered:
        runs.append((RAW_LOWRES_DIR, plan.lowres_topology, cfg.seed + LOWRES_SEED_OFFSET))
    for folder, topo, seed in runs:
        out = cfg.path(folder)
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        fn = functools.partial(_simulate_one, topo=topo, cfg=cfg, seed=seed, num_classes=len(ds.classes))
        for case, d in zip(ds.cases, _parallel_map(fn, list(ds.cases), cfg.jobs)):
            write_json_artifact(d, out / f"{case.id}.json")
        log.info("simulated %d cases into %s", len(ds.cases), folder)


def _load_raw(cfg: RunConfig, folder: str, case_ids: Sequence[str]) -> dict[str, PatchPredictions]:
    root = _require(cfg.path(folder), f"{folder}/", "run the simulate stage or ingest predictions")
    out = {}
    for cid in case_ids:
        path = _require(root / f"{cid}.json", f"{folder}/{cid}.json")
        out[cid] = PatchPredictions.from_dict(read_json_artifact(path))
    return out


def stage_sweep(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    dev = _dev_cases(ds)
    if not dev:
        raise SweepError("no train or val cases to optimise on")
    ids = [c.id for c in dev]
    predictions = {FULLRES: _load_raw(cfg, RAW_DIR, ids)}
    if cfg.path(RAW_LOWRES_DIR).exists():
        predictions[LOWRES] = _load_raw(cfg, RAW_LOWRES_DIR, ids)
    folds = fold_assignment(ds, cfg.seed, cfg.folds)
    val = ValidationSet(predictions, _gt(dev), {cid: [folds[cid]] for cid in ids},
                        list(range(len(ds.classes))))
    report = sweep_sequential(val)
    write_json_artifact({**report.to_dict(), "folds": {cid: folds[cid] for cid in ids}},
                        cfg.path(SWEEP_JSON))
    write_json_artifact(report.chosen, cfg.path(PARAMS_JSON))
    rows = [(name, str(v), o, v == getattr(report.chosen, name))
            for name, vals in report.per_parameter.items() for v, o in vals]
    plotting.write_csv(cfg.path("sweep.csv"), ("parameter", "value", "objective", "chosen"), rows)
    plotting.plot_sweep(report.per_parameter, report.objective_trace, cfg.path("figures", "sweep.png"))
    log.info("sweep: %s", report.chosen)


def _consolidate_one(item, params: EmpiricalParams):
    preds, models = item
    return consolidate_case(preds, params.consolidation(), models)


def stage_consolidate(cfg: RunConfig) -> None:
    path = _require(cfg.path(PARAMS_JSON), hint="run the sweep stage")
    params = EmpiricalParams.from_dict(read_json_artifact(path))
    ds = _dataset(cfg)
    folder = RAW_LOWRES_DIR if params.model_choice == LOWRES else RAW_DIR
    raw = _load_raw(cfg, folder, [c.id for c in ds.cases])
    folds = fold_assignment(ds, cfg.seed, cfg.folds)
    items = [(raw[c.id], None if folds[c.id] is None else [folds[c.id]]) for c in ds.cases]
    results = _parallel_map(functools.partial(_consolidate_one, params=params), items, cfg.jobs)
    out = cfg.path(PRED_DIR)
    if out.exists():
        shutil.rmtree(out)
    _write_boxes_dir(out, {c.id: r for c, r in zip(ds.cases, results)})
    log.info("consolidated %d cases with %s", len(ds.cases), params)


def _evaluate_split(cfg: RunConfig, cases: Sequence[Case], preds: dict[str, list[BoundingBox]],
                    num_classes: int) -> dict:
    ids = [c.id for c in cases]
    spacing = {c.id: c.spacing_mm for c in cases}
    sub = {cid: preds[cid] for cid in ids}
    return evaluate(sub, _gt(cases), list(range(num_classes)), cfg.iou_threshold, cfg.criterion, spacing)


def stage_evaluate(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    root = _require(cfg.path(PRED_DIR), f"{PRED_DIR}/", "run the consolidate or baseline stage")
    preds = {c.id: read_boxes(_require(root / f"{c.id}.json", f"{PRED_DIR}/{c.id}.json")) for c in ds.cases}
    splits = {"test": ds.split("test"), "validation": _dev_cases(ds)}
    splits = {k: v for k, v in splits.items() if v}
    primary = next(iter(splits))
    report = {"primary_split": primary,
              "splits": {k: _evaluate_split(cfg, v, preds, len(ds.classes)) for k, v in splits.items()}}
    write_json_artifact(report, cfg.path(METRICS_JSON))

    main = report["splits"][primary]
    if main["froc"] is not None:
        froc = main["froc"]
        plotting.write_csv(cfg.path("froc.csv"), ("fp_per_scan", "sensitivity"),
                           plotting.froc_rows(froc["points"]))
        sens = dict(zip(FROC_THRESHOLDS, main["sensitivities_at"]))
        plotting.plot_froc(froc["points"], sens, cfg.path("figures", "froc.png"), main["cpm"])
    cases = splits[primary]
    match = match_greedy({c.id: preds[c.id] for c in cases}, _gt(cases), cfg.iou_threshold, cfg.criterion,
                         {c.id: c.spacing_mm for c in cases})
    curves, rows = {}, []
    for cls in range(len(ds.classes)):
        recall, precision, n_gt = precision_recall(match, cls)
        if n_gt == 0:
            continue
        curves[ds.classes[cls]] = (recall.tolist(), precision.tolist(), average_precision(match, cls))
        rows += [(cls, float(r), float(p)) for r, p in zip(recall, precision)]
    plotting.write_csv(cfg.path("pr.csv"), ("class_id", "recall", "precision"), rows)
    plotting.plot_pr(curves, cfg.path("figures", "pr.png"))
    log.info("%s mAP %s CPM %s", primary, main["mAP"], main["cpm"])


def _convert_one(case: Case, min_diameter_mm: float, exclusions, out: Path):
    image = case.load_image()
    labels = case.load_labels()
    write_volume(out, "images", case.id, image.data, case.spacing_mm, case.image.dtype)
    if labels is None:
        if case.objects:
            write_boxes(out / "boxes" / f"{case.id}.json", case.objects)
        return len(case.objects)
    new_map, table, objects = labelmap_to_objects(labels.data, case.instance_classes, case.spacing_mm,
                                                  min_diameter_mm, exclusions, case.id)
    write_volume(out, "labels", case.id, new_map, case.spacing_mm, "u16",
                 {"instances": {str(k): int(v) for k, v in sorted(table.items())}})
    write_boxes(out / "boxes" / f"{case.id}.json", [b for _, b in objects], [i for i, _ in objects])
    return len(objects)


def stage_convert_labels(cfg: RunConfig) -> None:
    """Re-derive box ground truth from label maps into ``<workdir>/converted``."""
    ds = _dataset(cfg)
    out = cfg.path(CONVERTED_DIR)
    if out.exists():
        shutil.rmtree(out)
    fn = functools.partial(_convert_one, min_diameter_mm=cfg.min_diameter_mm,
                           exclusions=sorted(ds.exclusion_list), out=out)
    counts = _parallel_map(fn, list(ds.cases), cfg.jobs)
    # excluded instances are gone and the rest renumbered, so the list is spent
    write_dataset_json(out, ds.name, ds.classes, [(c.id, c.split) for c in ds.cases])
    load_dataset(out)
    log.info("converted %d cases, %d objects", len(ds.cases), sum(counts))


def _softmax_root(cfg: RunConfig) -> Path:
    return Path(cfg.softmax_root) if cfg.softmax_root else Path(cfg.dataset_root)


def _load_softmaxes(cfg: RunConfig, cases: Sequence[Case]) -> dict[str, np.ndarray]:
    root = _softmax_root(cfg)
    out = {}
    for c in cases:
        _require(root / "softmax" / f"{c.id}.json", f"softmax/{c.id}.json",
                 f"expected under {root / 'softmax'}")
        out[c.id] = load_softmax(root, c.id)
    return out


def baseline_predictions(softmaxes: dict[str, np.ndarray], params: SegPostParams) -> dict[str, list[BoundingBox]]:
    return {cid: instances_from_softmax(s, params) for cid, s in sorted(softmaxes.items())}


def stage_baseline(cfg: RunConfig) -> None:
    """Segmentation baseline: components of the softmax maps become scored boxes.

    ``basic`` takes the argmax. ``plus`` tunes threshold, minimum size and
    score aggregation on the development cases first.
    """
    ds = _dataset(cfg)
    softmaxes = _load_softmaxes(cfg, ds.cases)
    params = SegPostParams()
    summary: dict = {"variant": cfg.baseline_variant}
    dev = _dev_cases(ds)
    if cfg.baseline_variant == "plus" and dev:
        dev_soft = {c.id: softmaxes[c.id] for c in dev}
        gt = _gt(dev)
        classes = list(range(len(ds.classes)))

        def objective(p: SegPostParams) -> float:
            return map_at(baseline_predictions(dev_soft, p), gt, classes)

        params, per_parameter, trace = sequential_sweep(objective, params, BASELINE_GRIDS, BASELINE_ORDER)
        summary["per_parameter"] = {k: [[v, o] for v, o in rows] for k, rows in per_parameter.items()}
        summary["objective_trace"] = trace
    summary["params"] = dataclasses.asdict(params)
    out = cfg.path(PRED_DIR)
    if out.exists():
        shutil.rmtree(out)
    _write_boxes_dir(out, baseline_predictions(softmaxes, params))
    write_json_artifact(summary, cfg.path(BASELINE_JSON))
    log.info("baseline %s with %s", cfg.baseline_variant, params)


STAGE_FUNCS: dict[str, Callable[[RunConfig], None]] = {
    "fingerprint": stage_fingerprint,
    "plan": stage_plan,
    "convert-labels": stage_convert_labels,
    "baseline": stage_baseline,
    "simulate": stage_simulate,
    "consolidate": stage_consolidate,
    "sweep": stage_sweep,
    "evaluate": stage_evaluate,
}


def run_stage(cfg: RunConfig, stage: str) -> int:
    """Run one stage (or the whole chain) and map failures to exit codes."""
    if stage not in STAGES:
        log.error("unknown stage %r", stage)
        return EXIT_INVALID
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    chain = ALL_CHAIN if stage == "all" else (stage,)
    try:
        for name in chain:
            log.info("stage %s", name)
            STAGE_FUNCS[name](cfg)
    except MissingArtifactError as e:
        log.error("%s", e)
        return EXIT_MISSING
    except (DatasetError, ValueError) as e:
        log.error("invalid input: %s", e)
        return EXIT_INVALID
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", required=True, type=Path, help="dataset directory")
    common.add_argument("--workdir", required=True, type=Path, help="artifact directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--folds", type=int, default=5)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="parallel workers for per-case work (default: all processors)")
    common.add_argument("--voxel-budget", type=int, default=DEFAULT_VOXEL_BUDGET)
    common.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP, help="sliding-window overlap")
    common.add_argument("--min-diameter-mm", type=float, default=MIN_DIAMETER_MM)
    common.add_argument("--criterion", choices=[c.value for c in Criterion], default=Criterion.IOU.value)
    common.add_argument("--iou-threshold", type=float, default=0.1)
    common.add_argument("--anchor-iters", type=int, default=3)
    common.add_argument("--tta", type=int, default=2, help="simulated test-time augmentation variants")
    common.add_argument("--jitter", type=float, default=1.0, help="oracle centre jitter (voxels)")
    common.add_argument("--size-jitter", type=float, default=0.0, help="oracle relative size jitter")
    common.add_argument("--fp-per-patch", type=float, default=0.5)
    common.add_argument("--drop-rate", type=float, default=0.1)
    common.add_argument("--variant", choices=("basic", "plus"), default="plus", help="baseline variant")
    common.add_argument("--softmax-dir", type=Path, default=None,
                        help="directory holding softmax/<case>.json (default: the dataset)")

    parser = argparse.ArgumentParser(prog="detpipe", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    noise = OracleNoise(args.jitter, args.size_jitter, args.fp_per_patch, drop_rate=args.drop_rate)
    return RunConfig(
        dataset_root=args.dataset, workdir=args.workdir, folds=args.folds, seed=args.seed, jobs=args.jobs,
        voxel_budget=args.voxel_budget, overlap=args.overlap, min_diameter_mm=args.min_diameter_mm,
        criterion=args.criterion, iou_threshold=args.iou_threshold, num_tta=args.tta,
        anchor_iters=args.anchor_iters, noise=noise, baseline_variant=args.variant,
        softmax_root=args.softmax_dir,
    )


def main(argv: Sequence[str] | None = None) -> int:
    level = logging.getLevelName(os.environ.get("DETPIPE_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ValueError as e:
        log.error("invalid arguments: %s", e)
        return EXIT_INVALID
    return run_stage(cfg, args.stage)


if __name__ == "__main__":
    sys.exit(main())
