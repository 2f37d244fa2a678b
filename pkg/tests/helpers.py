"""Builders shared by several test modules."""

import numpy as np

from detpipe.fingerprint import DatasetFingerprint


def make_fingerprint(median_shape=(128, 128, 128), spacing_p50=(1.0, 1.0, 1.0), spacing_p10=None,
                     extent_p99=None, num_cases=10, median_size_mm=None) -> DatasetFingerprint:
    """A fingerprint with chosen shape and spacing statistics; unused fields are filler."""
    spacing_p10 = spacing_p10 or spacing_p50
    if median_size_mm is None:
        median_size_mm = tuple(float(n) * s for n, s in zip(median_shape, spacing_p50))
    spacing = tuple({"p10": lo, "p50": mid, "p90": mid} for lo, mid in zip(spacing_p10, spacing_p50))
    extents = None
    if extent_p99 is not None:
        extents = tuple({k: float(v) for k in ("p10", "p25", "p50", "p75", "p90", "p99")} for v in extent_p99)
    return DatasetFingerprint(
        median_shape=tuple(int(v) for v in median_shape),
        median_size_mm=tuple(float(v) for v in median_size_mm),
        spacing_percentiles=spacing,
        intensity_global={"mean": 0.0, "std": 1.0, "min": 0.0, "max": 1.0, "p0.5": 0.0, "p99.5": 1.0},
        object_extent_percentiles_mm=extents,
        objects_per_case={"min": 1.0, "median": 1.0, "max": 1.0},
        num_classes=1,
        num_cases=num_cases,
        anisotropy_ratio=max(spacing_p50) / min(spacing_p50),
    )


def random_boxes(rng: np.random.Generator, n: int, lo=0.0, hi=100.0, min_edge=1.0, max_edge=20.0) -> np.ndarray:
    start = rng.uniform(lo, hi, (n, 3))
    edge = rng.uniform(min_edge, max_edge, (n, 3))
    return np.concatenate([start, start + edge], axis=1)


# acceptance criteria outcomes, echoed in the terminal summary by conftest
ACCEPTANCE_RESULTS: list[str] = []


def report_criterion(number: int, ok: bool, detail: str, seconds: float | None = None) -> None:
    timing = f" [{seconds:.2f} s]" if seconds is not None else ""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}{timing}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line
