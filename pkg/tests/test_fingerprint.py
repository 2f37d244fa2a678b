import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detpipe.dataio import BoundingBox, Case, VolumeHeader, Volume, write_json_artifact, read_json_artifact
from detpipe.fingerprint import (
    CaseStats,
    DatasetFingerprint,
    FingerprintError,
    case_fingerprint,
    dataset_fingerprint,
    intensity_stats,
    strided_subsample,
)
from detpipe.synth import SynthConfig, generate_synthetic_dataset


def stats_for(shape=(10, 10, 10), spacing=(1.0, 1.0, 1.0), extents=(), sample=(0.0,)):
    sample = np.sort(np.asarray(sample, dtype=float))
    counts = {0: len(extents)} if extents else {}
    return CaseStats(tuple(shape), tuple(spacing), intensity_stats(sample), tuple(tuple(e) for e in extents),
                     counts, sample)


def case_with_box(spacing, image_value=0.0):
    header = VolumeHeader((12, 12, 12), spacing, "f32")
    case = Case("c", header, objects=(BoundingBox((0, 0, 0), (10, 10, 10)),))
    return case, Volume(header, np.full((12, 12, 12), image_value, dtype=np.float32))


def sort_oracle(values, q):
    ordered = sorted(values)
    n = len(ordered)
    rank = next(r for r in range(1, n + 1) if r >= q * n - 1e-9)
    return ordered[rank - 1]


extent_lists = st.lists(st.tuples(*[st.floats(0.5, 50)] * 3), min_size=0, max_size=6)
case_stats = st.builds(
    lambda shape, spacing, ext, sample: stats_for(shape, spacing, ext, sample),
    st.tuples(*[st.integers(1, 300)] * 3),
    st.tuples(*[st.sampled_from([0.5, 0.7, 1.0, 1.25, 2.5, 5.0])] * 3),
    extent_lists,
    st.lists(st.floats(-1000, 1000), min_size=1, max_size=20),
)


class TestCaseFingerprint:
    def test_extent_isotropic(self):
        case, image = case_with_box((1, 1, 1))
        assert case_fingerprint(case, image).object_extents_mm == ((10.0, 10.0, 10.0),)

    def test_extent_anisotropic(self):
        case, image = case_with_box((0.5, 1, 2))
        assert case_fingerprint(case, image).object_extents_mm == ((5.0, 10.0, 20.0),)

    def test_constant_image(self):
        case, image = case_with_box((1, 1, 1), image_value=3.0)
        intensity = case_fingerprint(case, image).intensity
        assert intensity["mean"] == 3.0
        assert intensity["std"] == 0.0
        assert intensity["p0.5"] == intensity["p99.5"] == 3.0

    def test_class_counts_sum(self, small_dataset):
        for case in small_dataset.cases:
            s = case_fingerprint(case)
            assert sum(s.class_counts.values()) == len(case.objects)
            assert all(v > 0 for e in s.object_extents_mm for v in e)

    def test_foreground_intensity(self, small_dataset):
        # synthetic objects sit at +100 above N(0, 10) noise
        s = case_fingerprint(small_dataset.cases[0])
        assert s.intensity["mean"] > 60

    def test_subsample_bounded_and_strided(self):
        values = np.arange(25_001)
        sub = strided_subsample(values, 10_000)
        assert len(sub) <= 10_000
        assert np.all(np.diff(sub) == 3)


class TestDatasetFingerprint:
    def test_empty(self):
        with pytest.raises(FingerprintError, match="fingerprint requires ≥1 case"):
            dataset_fingerprint([])

    def test_median_shape_example(self):
        fp = dataset_fingerprint([stats_for((100, 100, 50)), stats_for((120, 80, 50))])
        assert fp.median_shape == (110, 90, 50)

    def test_single_case_identity(self):
        s = stats_for((20, 30, 40), (0.5, 1.0, 2.0), [(3, 4, 5)], [1.0, 2.0, 7.0])
        fp = dataset_fingerprint([s])
        assert fp.median_shape == (20, 30, 40)
        assert fp.spacing("p10") == fp.spacing("p90") == (0.5, 1.0, 2.0)
        for key in ("p10", "p50", "p99"):
            assert fp.object_extent(key) == (3.0, 4.0, 5.0)
        assert fp.intensity_global == s.intensity
        assert fp.anisotropy_ratio == 4.0

    def test_percentiles_match_sort_oracle(self):
        cfg = SynthConfig(num_cases=100, dims=(40, 40, 40), objects_per_case=(1, 3),
                          object_edge_range=(4, 16), seed=11, shape="cuboid")
        rng = np.random.default_rng(5)
        stats = []
        all_ext = []
        for i in range(cfg.num_cases):
            ext = rng.integers(4, 17, size=(int(rng.integers(1, 4)), 3)).astype(float)
            all_ext += ext.tolist()
            stats.append(stats_for(cfg.dims, (1, 1, 1), ext.tolist()))
        fp = dataset_fingerprint(stats)
        for key, q in {"p10": .1, "p25": .25, "p50": .5, "p75": .75, "p90": .9, "p99": .99}.items():
            expected = tuple(sort_oracle([e[a] for e in all_ext], q) for a in range(3))
            assert fp.object_extent(key) == expected
            assert all(4 <= v <= 16 for v in expected)

    def test_synthetic_extents_within_configured_range(self, tmp_path):
        cfg = SynthConfig(num_cases=50, dims=(48, 48, 48), objects_per_case=(1, 2), object_edge_range=(4, 16),
                          seed=2, shape="cuboid")
        ds = generate_synthetic_dataset(cfg, tmp_path)
        fp = dataset_fingerprint([case_fingerprint(c) for c in ds.cases])
        all_ext = [b.extent for c in ds.cases for b in c.objects]
        for key, q in {"p10": .1, "p50": .5, "p99": .99}.items():
            assert fp.object_extent(key) == tuple(float(sort_oracle([e[a] for e in all_ext], q)) for a in range(3))
            assert all(4 <= v <= 16 for v in fp.object_extent(key))

    def test_json_roundtrip(self, tmp_path, small_dataset):
        fp = dataset_fingerprint([case_fingerprint(c) for c in small_dataset.cases], 2)
        write_json_artifact(fp, tmp_path / "fp.json")
        again = DatasetFingerprint.from_dict(read_json_artifact(tmp_path / "fp.json"))
        assert again == fp
        write_json_artifact(again, tmp_path / "fp2.json")
        assert (tmp_path / "fp.json").read_bytes() == (tmp_path / "fp2.json").read_bytes()

    @given(st.lists(case_stats, min_size=1, max_size=8), st.randoms())
    def test_permutation_invariance(self, stats, rnd):
        shuffled = list(stats)
        rnd.shuffle(shuffled)
        assert dataset_fingerprint(shuffled) == dataset_fingerprint(stats)

    @given(st.lists(case_stats, min_size=1, max_size=8))
    def test_monotone_families(self, stats):
        fp = dataset_fingerprint(stats)
        for a in range(3):
            sp = fp.spacing_percentiles[a]
            assert sp["p10"] <= sp["p50"] <= sp["p90"]
            if fp.object_extent_percentiles_mm is not None:
                e = fp.object_extent_percentiles_mm[a]
                assert e["p10"] <= e["p25"] <= e["p50"] <= e["p75"] <= e["p90"] <= e["p99"]
        g = fp.intensity_global
        assert g["min"] <= g["p0.5"] <= g["p99.5"] <= g["max"]

    @given(st.lists(case_stats, min_size=1, max_size=8))
    def test_doubling_spacing_doubles_extents(self, stats):
        doubled = [stats_for(s.shape, tuple(2 * v for v in s.spacing_mm),
                             [tuple(2 * v for v in e) for e in s.object_extents_mm], s.intensity_sample)
                   for s in stats]
        a, b = dataset_fingerprint(stats), dataset_fingerprint(doubled)
        if a.object_extent_percentiles_mm is None:
            assert b.object_extent_percentiles_mm is None
            return
        for pa, pb in zip(a.object_extent_percentiles_mm, b.object_extent_percentiles_mm):
            assert {k: 2 * v for k, v in pa.items()} == pb
