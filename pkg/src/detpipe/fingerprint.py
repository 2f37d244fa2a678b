"""Per-case statistics and the aggregated dataset fingerprint.

The fingerprint is what every rule-based planning decision reads: image
shapes and spacings, pooled intensity statistics and, specific to
detection, the distribution of object sizes in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from detpipe._stats import nearest_rank, nearest_rank_many
from detpipe.dataio import BoundingBox, Case, Volume

INTENSITY_SAMPLES_PER_CASE = 10_000
SPACING_QUANTILES = {"p10": 0.10, "p50": 0.50, "p90": 0.90}
EXTENT_QUANTILES = {"p10": 0.10, "p25": 0.25, "p50": 0.50, "p75": 0.75, "p90": 0.90, "p99": 0.99}


class FingerprintError(ValueError):
    pass


@dataclass(frozen=True)
class CaseStats:
    shape: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    intensity: Mapping[str, float]
    object_extents_mm: tuple[tuple[float, float, float], ...]
    class_counts: Mapping[int, int]
    # deterministic strided subsample, pooled by dataset_fingerprint; not serialized
    intensity_sample: np.ndarray = field(default_factory=lambda: np.zeros(0), compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing_mm": list(self.spacing_mm),
            "intensity": dict(self.intensity),
            "object_extents_mm": [list(e) for e in self.object_extents_mm],
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
        }


@dataclass(frozen=True)
class DatasetFingerprint:
    median_shape: tuple[int, int, int]
    median_size_mm: tuple[float, float, float]
    spacing_percentiles: tuple[Mapping[str, float], ...]
    intensity_global: Mapping[str, float]
    object_extent_percentiles_mm: tuple[Mapping[str, float], ...] | None
    objects_per_case: Mapping[str, float]
    num_classes: int
    num_cases: int
    anisotropy_ratio: float

    def spacing(self, key: str = "p50") -> tuple[float, float, float]:
        return tuple(self.spacing_percentiles[a][key] for a in range(3))

    def object_extent(self, key: str) -> tuple[float, float, float] | None:
        if self.object_extent_percentiles_mm is None:
            return None
        return tuple(self.object_extent_percentiles_mm[a][key] for a in range(3))

    def to_dict(self) -> dict:
        return {
            "median_shape": list(self.median_shape),
            "median_size_mm": list(self.median_size_mm),
            "spacing_percentiles": [dict(p) for p in self.spacing_percentiles],
            "intensity_global": dict(self.intensity_global),
            "object_extent_percentiles_mm": (
                None if self.object_extent_percentiles_mm is None
                else [dict(p) for p in self.object_extent_percentiles_mm]
            ),
            "objects_per_case": dict(self.objects_per_case),
            "num_classes": self.num_classes,
            "num_cases": self.num_cases,
            "anisotropy_ratio": self.anisotropy_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetFingerprint":
        ext = d.get("object_extent_percentiles_mm")
        return cls(
            median_shape=tuple(int(v) for v in d["median_shape"]),
            median_size_mm=tuple(float(v) for v in d["median_size_mm"]),
            spacing_percentiles=tuple(dict(p) for p in d["spacing_percentiles"]),
            intensity_global=dict(d["intensity_global"]),
            object_extent_percentiles_mm=None if ext is None else tuple(dict(p) for p in ext),
            objects_per_case=dict(d["objects_per_case"]),
            num_classes=int(d["num_classes"]),
            num_cases=int(d["num_cases"]),
            anisotropy_ratio=float(d["anisotropy_ratio"]),
        )


def strided_subsample(values: np.ndarray, limit: int = INTENSITY_SAMPLES_PER_CASE) -> np.ndarray:
    """Every k-th element so that at most ``limit`` values remain."""
    values = np.asarray(values).ravel()
    if values.size <= limit:
        return values
    step = -(-values.size // limit)
    return values[::step]


def intensity_stats(sample: np.ndarray) -> dict[str, float]:
    sample = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    if sample.size == 0:
        return {k: 0.0 for k in ("mean", "std", "min", "max", "p0.5", "p99.5")}
    p_lo, p_hi = nearest_rank_many(sample, (0.005, 0.995))
    return {
        "mean": float(sample.mean()),
        "std": float(sample.std()),
        "min": float(sample[0]),
        "max": float(sample[-1]),
        "p0.5": p_lo,
        "p99.5": p_hi,
    }


def boxes_from_labelmap(labels: np.ndarray, instance_classes: Mapping[int, int]) -> list[BoundingBox]:
    """Tight box per instance id present in ``labels`` (ids ascending)."""
    boxes = []
    slices = ndimage.find_objects(labels.astype(np.int64))
    for inst, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        boxes.append(BoundingBox(tuple(s.start for s in sl), tuple(s.stop for s in sl),
                                 instance_classes.get(inst, 0)))
    return boxes


def case_fingerprint(case: Case, image: Volume | None = None, labels: Volume | None = None) -> CaseStats:
    """Statistics of one case.

    Intensity is taken over foreground voxels when a labelmap exists and is
    non-empty, otherwise over the whole image.
    """
    if image is None:
        image = case.load_image()
    if labels is None and case.labels is not None:
        labels = case.load_labels()

    data = image.data
    if labels is not None and np.any(labels.data > 0):
        # x-fastest order, so the subsample is independent of memory layout
        values = data.ravel(order="F")[labels.data.ravel(order="F") > 0]
    else:
        values = data.ravel(order="F")
    sample = np.sort(strided_subsample(values).astype(np.float64))

    objects = list(case.objects)
    if not objects and labels is not None:
        objects = boxes_from_labelmap(labels.data, case.instance_classes)
    extents = tuple(b.extent_mm(case.spacing_mm) for b in objects)
    counts: dict[int, int] = {}
    for b in objects:
        counts[b.class_id] = counts.get(b.class_id, 0) + 1

    return CaseStats(
        shape=case.image.dims,
        spacing_mm=case.spacing_mm,
        intensity=intensity_stats(sample),
        object_extents_mm=extents,
        class_counts=counts,
        intensity_sample=sample,
    )


def _median_int(values: Sequence[float]) -> int:
    return int(round(float(np.median(values))))


def dataset_fingerprint(stats: Sequence[CaseStats], num_classes: int | None = None) -> DatasetFingerprint:
    """Aggregate case statistics; the result does not depend on the order of ``stats``."""
    if not stats:
        raise FingerprintError("fingerprint requires ≥1 case")

    shapes = np.array([s.shape for s in stats], dtype=float)
    spacings = np.array([s.spacing_mm for s in stats], dtype=float)
    sizes = shapes * spacings

    median_shape = tuple(_median_int(shapes[:, a]) for a in range(3))
    median_size = tuple(float(np.median(sizes[:, a])) for a in range(3))
    spacing_pct = tuple(
        {k: nearest_rank(spacings[:, a], q) for k, q in SPACING_QUANTILES.items()} for a in range(3)
    )

    pooled = np.sort(np.concatenate([s.intensity_sample for s in stats]))
    intensity_global = intensity_stats(pooled)

    extents = [e for s in stats for e in s.object_extents_mm]
    if extents:
        ext = np.array(extents, dtype=float)
        extent_pct = tuple(
            {k: nearest_rank(ext[:, a], q) for k, q in EXTENT_QUANTILES.items()} for a in range(3)
        )
    else:
        extent_pct = None

    per_case = [len(s.object_extents_mm) for s in stats]
    seen_classes = {c for s in stats for c in s.class_counts}
    if num_classes is None:
        num_classes = max(seen_classes) + 1 if seen_classes else 0

    p50 = [spacing_pct[a]["p50"] for a in range(3)]
    return DatasetFingerprint(
        median_shape=median_shape,
        median_size_mm=median_size,
        spacing_percentiles=spacing_pct,
        intensity_global=intensity_global,
        object_extent_percentiles_mm=extent_pct,
        objects_per_case={
            "min": float(min(per_case)),
            "median": float(np.median(per_case)),
            "max": float(max(per_case)),
        },
        num_classes=int(num_classes),
        num_cases=len(stats),
        anisotropy_ratio=max(p50) / min(p50),
    )
