"""Segmentation to detection.

Two uses: ground-truth boxes from label maps (connected components with a
minimum diameter), and the segmentation baselines that turn per-voxel
softmax maps into scored boxes. The "basic" variant takes the argmax, the
"plus" variant thresholds class scores, drops small components and picks a
score aggregation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from detpipe._stats import nearest_rank
from detpipe.dataio import BoundingBox

MIN_DIAMETER_MM = 3.0
SOFTMAX_TOLERANCE = 1e-5
# 26-connectivity
_STRUCTURE = np.ones((3, 3, 3), dtype=bool)


class Aggregation(str, enum.Enum):
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"
    P95 = "p95"


@dataclass(frozen=True)
class Component:
    instance_id: int
    class_id: int
    voxel_count: int
    bbox: BoundingBox
    extent_mm: tuple[float, float, float]

    @property
    def diameter_mm(self) -> float:
        return max(self.extent_mm)


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labelmap: np.ndarray
    components: tuple[Component, ...]

    def __len__(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class SegPostParams:
    softmax_threshold: float = 0.0
    min_voxels: int = 0
    aggregation: Aggregation = Aggregation.MAX

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if not 0.0 <= self.softmax_threshold <= 1.0:
            raise ValueError("softmax_threshold must be in [0, 1]")
        if self.min_voxels < 0:
            raise ValueError("min_voxels must be non-negative")


def connected_components_3d(mask: np.ndarray, spacing_mm: Sequence[float] = (1.0, 1.0, 1.0),
                            class_id: int = 0, first_id: int = 1) -> ComponentSet:
    """Label a binary ``[x, y, z]`` mask with 26-connectivity.

    Ids follow the first voxel of each component in x-fastest scan order,
    starting at ``first_id``.
    """
    mask = np.asarray(mask, dtype=bool)
    # scipy scans C-order; on the [z, y, x] view that is x-fastest
    raw, n = ndimage.label(mask.T, structure=_STRUCTURE)
    raw = raw.T
    labelmap = np.zeros(mask.shape, dtype=np.uint16 if n + first_id <= 65536 else np.uint32)
    if n == 0:
        return ComponentSet(labelmap, ())

    labelmap[mask] = raw[mask] + (first_id - 1)
    counts = np.bincount(raw.ravel(), minlength=n + 1)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(raw), start=1):
        box = BoundingBox(tuple(s.start for s in sl), tuple(s.stop for s in sl), class_id)
        comps.append(Component(i + first_id - 1, class_id, int(counts[i]), box,
                               box.extent_mm(spacing_mm)))
    return ComponentSet(labelmap, tuple(comps))


def components_to_objects(cs: ComponentSet | Iterable[Component], spacing_mm: Sequence[float] | None = None,
                          min_diameter_mm: float = MIN_DIAMETER_MM,
                          exclusions: Iterable[tuple[str, int]] = (),
                          case_id: str | None = None) -> list[tuple[int, BoundingBox]]:
    """Keep components whose largest world extent is at least ``min_diameter_mm``.

    Returns ``(instance_id, box)`` pairs. Excluded ``(case_id, instance_id)``
    pairs are dropped whatever their size.
    """
    comps = cs.components if isinstance(cs, ComponentSet) else tuple(cs)
    excluded = {int(i) for c, i in exclusions if c == case_id}
    kept = []
    for comp in comps:
        extent = comp.extent_mm if spacing_mm is None else comp.bbox.extent_mm(spacing_mm)
        # tolerate float noise such as 0.6 * 5 = 2.9999999999999996
        if max(extent) < min_diameter_mm - 1e-9:
            continue
        if comp.instance_id in excluded:
            continue
        kept.append((comp.instance_id, comp.bbox))
    return kept


def labelmap_to_objects(labels: np.ndarray, instance_classes: Mapping[int, int],
                        spacing_mm: Sequence[float], min_diameter_mm: float = MIN_DIAMETER_MM,
                        exclusions: Iterable[tuple[str, int]] = (), case_id: str | None = None):
    """Re-derive object annotations from an instance or semantic label map.

    Voxels are grouped per class, split into connected components (numbered
    across classes in ascending class order) and filtered by diameter.
    Returns ``(new_labelmap, instance_classes, [(instance_id, box), ...])``;
    dropped components are erased from the new label map.
    """
    class_of = np.zeros(int(labels.max()) + 1, dtype=np.int64) - 1
    for inst, cls in instance_classes.items():
        if inst < len(class_of):
            class_of[int(inst)] = int(cls)
    voxel_class = class_of[labels]
    new_map = np.zeros(labels.shape, dtype=np.uint16)
    table: dict[int, int] = {}
    objects = []
    next_id = 1
    exclusions = list(exclusions)
    for cls in sorted({int(c) for c in instance_classes.values()}):
        cs = connected_components_3d(voxel_class == cls, spacing_mm, cls, first_id=next_id)
        next_id += len(cs)
        for inst, box in components_to_objects(cs, spacing_mm, min_diameter_mm, exclusions, case_id):
            new_map[cs.labelmap == inst] = inst
            table[inst] = cls
            objects.append((inst, box))
    # renumber kept components 1..N in their existing order
    remap = {old: new for new, (old, _) in enumerate(objects, start=1)}
    lut = np.zeros(next_id, dtype=np.uint16)
    for old, new in remap.items():
        lut[old] = new
    new_map = lut[new_map]
    objects = [(remap[i], b) for i, b in objects]
    table = {remap[i]: c for i, c in table.items()}
    return new_map, table, objects


def aggregate_component_score(voxel_scores: Sequence[float] | np.ndarray,
                              method: Aggregation | str = Aggregation.MAX) -> float:
    values = np.asarray(voxel_scores, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("cannot aggregate an empty component")
    method = Aggregation(method)
    if method is Aggregation.MAX:
        return float(values.max())
    if method is Aggregation.MEAN:
        # constant inputs must come back unchanged
        if values.min() == values.max():
            return float(values[0])
        return float(values.mean())
    if method is Aggregation.MEDIAN:
        return nearest_rank(values, 0.5)
    return nearest_rank(values, 0.95)


def check_softmax(softmax: np.ndarray) -> None:
    softmax = np.asarray(softmax)
    if softmax.ndim != 4 or softmax.shape[0] < 2:
        raise ValueError("softmax must be (classes incl. background, x, y, z)")
    total = softmax.sum(axis=0)
    if np.any(np.abs(total - 1.0) > SOFTMAX_TOLERANCE):
        raise ValueError("malformed softmax: channel scores do not sum to 1")


def instances_from_softmax(softmax: np.ndarray, params: SegPostParams | None = None) -> list[BoundingBox]:
    """Scored boxes from a ``(C, x, y, z)`` softmax whose channel 0 is background.

    Channel ``c >= 1`` maps to ``class_id = c - 1``. A threshold of 0 selects
    argmax mode; otherwise every voxel whose class score reaches the threshold
    joins that class's mask, so a voxel can belong to several classes.
    """
    params = params or SegPostParams()
    softmax = np.asarray(softmax, dtype=float)
    check_softmax(softmax)
    argmax = np.argmax(softmax, axis=0) if params.softmax_threshold == 0 else None
    out = []
    for c in range(1, softmax.shape[0]):
        mask = argmax == c if argmax is not None else softmax[c] >= params.softmax_threshold
        cs = connected_components_3d(mask, class_id=c - 1)
        for comp in cs.components:
            if comp.voxel_count < params.min_voxels:
                continue
            scores = softmax[c][cs.labelmap == comp.instance_id]
            score = aggregate_component_score(scores, params.aggregation)
            out.append(BoundingBox(comp.bbox.min, comp.bbox.max, c - 1, score))
    out.sort(key=lambda b: (-b.score, b.class_id, b.min))
    return out
