import numpy as np
import pytest

from detpipe.boxcluster import tile_patches
from detpipe.dataio import BoundingBox
from detpipe.seg2det import connected_components_3d
from detpipe.synth import (
    OracleNoise,
    SynthConfig,
    SynthError,
    generate_synthetic_dataset,
    oracle_predict_patches,
    simulate_case,
    synthesize_softmax,
)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestDataset:
    def test_single_cube(self, tmp_path):
        cfg = SynthConfig(num_cases=1, dims=(32, 32, 32), objects_per_case=(1, 1), object_edge_range=(8, 8),
                          shape="cuboid")
        ds = generate_synthetic_dataset(cfg, tmp_path)
        case = ds.cases[0]
        cs = connected_components_3d(case.load_labels().data > 0)
        assert len(cs) == 1 and cs.components[0].voxel_count == 512
        assert case.objects[0].extent == (8, 8, 8)

    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(num_cases=3, dims=(24, 24, 24), object_edge_range=(3, 8), seed=5, test_fraction=0.34)
        generate_synthetic_dataset(cfg, tmp_path / "one")
        generate_synthetic_dataset(cfg, tmp_path / "two")
        assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")

    def test_seed_matters(self, tmp_path):
        a = generate_synthetic_dataset(SynthConfig(num_cases=2, dims=(24, 24, 24), seed=1), tmp_path / "a")
        b = generate_synthetic_dataset(SynthConfig(num_cases=2, dims=(24, 24, 24), seed=2), tmp_path / "b")
        assert [c.objects for c in a.cases] != [c.objects for c in b.cases]

    def test_objects_disjoint_and_labelled(self, small_dataset):
        for case in small_dataset.cases:
            labels = case.load_labels().data
            for i, a in enumerate(case.objects):
                for b in case.objects[i + 1:]:
                    assert any(a.max[k] <= b.min[k] or b.max[k] <= a.min[k] for k in range(3))
            assert len(np.unique(labels)) == len(case.objects) + 1

    def test_test_split(self, small_dataset):
        assert sum(c.split == "test" for c in small_dataset.cases) == 3

    def test_object_too_large(self, tmp_path):
        with pytest.raises(SynthError):
            generate_synthetic_dataset(SynthConfig(num_cases=1, dims=(8, 8, 8), object_edge_range=(10, 12)), tmp_path)

    def test_crowded(self, tmp_path):
        cfg = SynthConfig(num_cases=1, dims=(10, 10, 10), objects_per_case=(5, 5), object_edge_range=(6, 6))
        with pytest.raises(SynthError):
            generate_synthetic_dataset(cfg, tmp_path)


class TestOracle:
    gt = [BoundingBox((3, 3, 3), (11, 11, 11)), BoundingBox((26, 40, 20), (38, 50, 30))]

    def test_zero_noise_is_exact_intersection(self):
        grid = tile_patches((64, 64, 64), (32, 32, 32))
        preds = oracle_predict_patches(self.gt, grid, OracleNoise())
        assert np.all(preds.scores == 0.9)
        for box, pid in zip(preds.boxes, preds.patch):
            patch = grid.patch_box(pid)
            lo = np.maximum(patch[:3], [g.min for g in self.gt])
            hi = np.minimum(patch[3:], [g.max for g in self.gt])
            assert any(np.array_equal(box, np.concatenate([l, h])) for l, h in zip(lo, hi))
        # every patch overlapping an object reports it
        expected = sum(
            np.all(np.minimum(grid.patch_box(p)[3:], g.as_array()[3:]) > np.maximum(grid.patch_box(p)[:3], g.as_array()[:3]))
            for p in range(len(grid.origins)) for g in self.gt)
        assert len(preds) == expected

    def test_drop_everything(self):
        grid = tile_patches((64, 64, 64), (32, 32, 32))
        preds = oracle_predict_patches(self.gt, grid, OracleNoise(drop_rate=1.0, fp_per_patch=1.0,
                                                                  score_fp=(0.3, 0.0)))
        # only false positives remain, all at the fp score
        assert len(preds) > 0 and np.all(preds.scores == 0.3)

    def test_boxes_stay_in_patch(self):
        grid = tile_patches((64, 64, 64), (32, 32, 32))
        preds = oracle_predict_patches(self.gt, grid, OracleNoise(2.0, 0.3, 2.0))
        for box, pid in zip(preds.boxes, preds.patch):
            patch = grid.patch_box(pid)
            assert np.all(box[:3] >= patch[:3]) and np.all(box[3:] <= patch[3:])
            assert np.all(box[3:] > box[:3])

    def test_jitter_statistics(self):
        # centre offsets of unclipped copies follow N(0, sigma); 4 sigma bounds on the sample moments
        grid = tile_patches((64, 64, 64), (64, 64, 64))
        gt = [BoundingBox((28, 28, 28), (36, 36, 36))]
        sigma = 1.5
        offsets = []
        for s in range(3400):
            p = oracle_predict_patches(gt, grid, OracleNoise(center_jitter_voxels=sigma), seed=s)
            offsets.append((p.boxes[0, :3] + p.boxes[0, 3:]) / 2 - 32)
        x = np.concatenate(offsets)[:10_000]
        n = len(x)
        assert abs(x.mean()) < 4 * sigma / np.sqrt(n)
        # var of the sample variance of a normal is 2 sigma^4 / (n - 1)
        assert abs(x.var(ddof=1) - sigma ** 2) < 4 * sigma ** 2 * np.sqrt(2 / (n - 1))

    def test_reproducible_per_source(self):
        grid = tile_patches((64, 64, 64), (32, 32, 32))
        noise = OracleNoise(1.0, 0.1, 0.5)
        a = oracle_predict_patches(self.gt, grid, noise, seed=3, model=1)
        b = oracle_predict_patches(self.gt, grid, noise, seed=3, model=1)
        c = oracle_predict_patches(self.gt, grid, noise, seed=3, model=2)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        assert not np.array_equal(a.scores, c.scores) or not np.array_equal(a.boxes, c.boxes)

    def test_simulate_case_tags_sources(self, small_dataset):
        preds = simulate_case(small_dataset.cases[0], (16, 16, 16), OracleNoise(), num_models=2, num_tta=2)
        assert preds.num_models == 2 and preds.num_tta == 2
        assert set(preds.model.tolist()) == {0, 1} and set(preds.tta.tolist()) == {0, 1}

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            OracleNoise(center_jitter_voxels=-1)
        with pytest.raises(ValueError):
            OracleNoise(drop_rate=1.5)


class TestSoftmaxSynthesis:
    def test_channels_sum_to_one(self):
        labels = np.zeros((6, 6, 6), np.uint16)
        labels[1:3, 1:3, 1:3] = 1
        labels[4:6, 4:6, 4:6] = 2
        soft = synthesize_softmax(labels, {1: 0, 2: 1}, 2, 0.45)
        np.testing.assert_allclose(soft.sum(axis=0), 1.0, atol=1e-6)
        assert soft[2, 5, 5, 5] == pytest.approx(0.45) and soft[0, 5, 5, 5] == pytest.approx(0.55)
