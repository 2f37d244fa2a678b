import json
import logging

import pytest

from detpipe.cli import (
    EXIT_INVALID,
    EXIT_MISSING,
    EXIT_OK,
    RunConfig,
    fold_assignment,
    fold_of,
    main,
    run_stage,
)
from detpipe.dataio import load_dataset, read_boxes, write_softmax
from detpipe.synth import synthesize_softmax

FAST = ["--jobs", "1", "--voxel-budget", "4096", "--folds", "3", "--tta", "1"]


def cli(stage, dataset, workdir, *extra):
    return main([stage, "--dataset", str(dataset), "--workdir", str(workdir), *FAST, *extra])


@pytest.fixture(scope="module")
def full_run(small_dataset, tmp_path_factory):
    work = tmp_path_factory.mktemp("run")
    assert cli("all", small_dataset.root, work) == EXIT_OK
    return work


class TestAll:
    def test_artifacts(self, full_run, small_dataset):
        for name in ("fingerprint.json", "plan.json", "anchor_coverage.json", "sweep.json", "empirical_params.json",
                     "metrics.json", "sweep.csv", "froc.csv", "pr.csv"):
            assert (full_run / name).is_file(), name
        for fig in ("sweep.png", "froc.png", "pr.png"):
            assert (full_run / "figures" / fig).stat().st_size > 0
        preds = sorted(p.stem for p in (full_run / "predictions").glob("*.json"))
        assert preds == sorted(c.id for c in small_dataset.cases)
        assert len(list((full_run / "raw_predictions").glob("*.json"))) == len(small_dataset.cases)

    def test_metrics_structure(self, full_run):
        metrics = json.loads((full_run / "metrics.json").read_text())
        assert metrics["primary_split"] == "test"
        for split in metrics["splits"].values():
            assert 0.0 <= split["mAP"] <= 1.0
            assert len(split["sensitivities_at"]) == 7

    def test_csv_rows(self, full_run):
        lines = (full_run / "froc.csv").read_text().splitlines()
        assert lines[0] == "fp_per_scan,sensitivity"
        assert len(lines) > 2
        assert (full_run / "sweep.csv").read_text().startswith("parameter,value,objective,chosen")

    def test_folds_recorded(self, full_run, small_dataset):
        sweep = json.loads((full_run / "sweep.json").read_text())
        assert sweep["folds"] == {cid: f for cid, f in fold_assignment(small_dataset, 0, 3).items()
                                  if f is not None}

    def test_evaluate_rerun_identical(self, full_run, small_dataset):
        before = {n: (full_run / n).read_bytes() for n in ("metrics.json", "froc.csv", "pr.csv")}
        assert cli("evaluate", small_dataset.root, full_run) == EXIT_OK
        assert {n: (full_run / n).read_bytes() for n in before} == before


class TestErrors:
    def test_sweep_without_predictions(self, small_dataset, tmp_path, caplog):
        assert cli("fingerprint", small_dataset.root, tmp_path) == EXIT_OK
        assert cli("plan", small_dataset.root, tmp_path) == EXIT_OK
        with caplog.at_level(logging.ERROR):
            assert cli("sweep", small_dataset.root, tmp_path) == EXIT_MISSING
        assert "raw_predictions" in caplog.text

    def test_plan_without_fingerprint(self, small_dataset, tmp_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert cli("plan", small_dataset.root, tmp_path) == EXIT_MISSING
        assert "fingerprint.json" in caplog.text

    def test_bad_folds(self, small_dataset, tmp_path):
        assert main(["fingerprint", "--dataset", str(small_dataset.root), "--workdir", str(tmp_path),
                     "--folds", "0"]) == EXIT_INVALID

    def test_missing_dataset(self, tmp_path):
        assert cli("fingerprint", tmp_path / "nope", tmp_path / "work") == EXIT_INVALID

    def test_unknown_stage(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "x", "--workdir", str(tmp_path)])
        assert exc.value.code == 2
        assert run_stage(RunConfig(tmp_path, tmp_path), "train") == EXIT_INVALID


class TestFolds:
    def test_stable_and_in_range(self):
        assert fold_of(0, "case_001", 5) == fold_of(0, "case_001", 5)
        values = {fold_of(0, f"case_{i:03d}", 5) for i in range(100)}
        assert values == set(range(5))

    def test_known_value(self):
        import hashlib
        digest = hashlib.sha256(b"3:abc").digest()
        assert fold_of(3, "abc", 7) == int.from_bytes(digest[:8], "big") % 7

    def test_test_cases_unassigned(self, small_dataset):
        folds = fold_assignment(small_dataset, 0, 5)
        assert all((f is None) == (c.split == "test") for c, f in zip(small_dataset.cases, folds.values()))


@pytest.fixture(scope="module")
def softmax_dir(small_dataset, tmp_path_factory):
    """Softmax maps whose objects score 0.45 against 0.55 background."""
    root = tmp_path_factory.mktemp("soft")
    for case in small_dataset.cases:
        labels = case.load_labels()
        soft = synthesize_softmax(labels.data, case.instance_classes, len(small_dataset.classes), 0.45)
        write_softmax(root, case.id, soft, case.spacing_mm)
    return root


class TestBaselineAndConversion:
    def test_plus_beats_basic(self, small_dataset, softmax_dir, tmp_path):
        scores = {}
        for variant in ("basic", "plus"):
            work = tmp_path / variant
            assert cli("baseline", small_dataset.root, work, "--variant", variant,
                       "--softmax-dir", str(softmax_dir)) == EXIT_OK
            assert cli("evaluate", small_dataset.root, work) == EXIT_OK
            scores[variant] = json.loads((work / "metrics.json").read_text())["splits"]["test"]["mAP"]
        assert scores["basic"] == 0.0
        assert scores["plus"] == 1.0
        summary = json.loads((tmp_path / "plus" / "baseline.json").read_text())
        assert 0 < summary["params"]["softmax_threshold"] <= 0.4

    def test_baseline_needs_softmax(self, small_dataset, tmp_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert cli("baseline", small_dataset.root, tmp_path) == EXIT_MISSING
        assert "softmax/" in caplog.text

    def test_convert_labels(self, small_dataset, tmp_path):
        assert cli("convert-labels", small_dataset.root, tmp_path) == EXIT_OK
        converted = load_dataset(tmp_path / "converted")
        assert [c.id for c in converted.cases] == [c.id for c in small_dataset.cases]
        for a, b in zip(converted.cases, small_dataset.cases):
            # every synthetic object is at least 3 voxels wide, so all survive
            assert sorted(a.objects, key=lambda x: x.min) == sorted(b.objects, key=lambda x: x.min)
            assert read_boxes(tmp_path / "converted" / "boxes" / f"{a.id}.json") == list(a.objects)
