"""Synthetic datasets and an oracle detector standing in for trained networks.

The oracle sees the ground truth and emits, per sliding-window patch, a
noisy copy of every object the patch overlaps plus random false
positives. All randomness derives from (seed, case, model, tta, patch), so
runs are reproducible and independent of evaluation order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from detpipe.boxcluster import PatchGrid, PatchPredictions, tile_patches
from detpipe.dataio import BoundingBox, Case, Dataset, load_dataset, write_case, write_dataset_json

MAX_PLACEMENT_ATTEMPTS = 1000


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_cases: int = 10
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    objects_per_case: tuple[int, int] = (1, 3)
    object_edge_range: tuple = (4, 16)
    num_classes: int = 1
    seed: int = 0
    shape: str = "mixed"
    test_fraction: float = 0.0
    gap: int = 1
    name: str = "synthetic"

    def edge_ranges(self) -> list[tuple[int, int]]:
        r = self.object_edge_range
        if len(r) == 2 and np.isscalar(r[0]):
            return [(int(r[0]), int(r[1]))] * 3
        return [(int(lo), int(hi)) for lo, hi in r]


@dataclass(frozen=True)
class OracleNoise:
    center_jitter_voxels: float = 0.0
    size_jitter_fraction: float = 0.0
    fp_per_patch: float = 0.0
    score_tp: tuple[float, float] = (0.9, 0.0)
    score_fp: tuple[float, float] = (0.3, 0.1)
    drop_rate: float = 0.0
    fp_edge_range: tuple[int, int] | None = None

    def __post_init__(self):
        if min(self.center_jitter_voxels, self.size_jitter_fraction, self.fp_per_patch,
               self.score_tp[1], self.score_fp[1]) < 0:
            raise ValueError("noise rates and standard deviations must be non-negative")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must be in [0, 1]")


def case_seed(seed: int, case_id: str, *extra: int) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(case_id.encode()), *[int(e) for e in extra]]


def _place_objects(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    dims = np.asarray(cfg.dims)
    ranges = cfg.edge_ranges()
    lo_n, hi_n = cfg.objects_per_case
    n = int(rng.integers(lo_n, hi_n + 1))
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            edge = np.array([rng.integers(lo, hi + 1) for lo, hi in ranges])
            if np.any(edge > dims):
                raise SynthError(f"objects cannot fit: edge {edge} exceeds volume {tuple(dims)}")
            start = np.array([rng.integers(0, d - e + 1) for d, e in zip(dims, edge)])
            stop = start + edge
            clear = all(
                np.any(stop + cfg.gap <= s) or np.any(e + cfg.gap <= start) for s, e in placed
            )
            if clear:
                placed.append((start, stop))
                break
        else:
            raise SynthError("objects cannot fit into the volume without overlap")
    return placed


def _rasterize(labels: np.ndarray, start: np.ndarray, stop: np.ndarray, inst: int, sphere: bool) -> None:
    sl = tuple(slice(int(a), int(b)) for a, b in zip(start, stop))
    if not sphere:
        labels[sl] = inst
        return
    grids = np.meshgrid(*[np.arange(a, b) + 0.5 for a, b in zip(start, stop)], indexing="ij")
    center = (start + stop) / 2
    radius = (stop - start) / 2
    inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radius)) <= 1.0
    labels[sl][inside] = inst


def generate_synthetic_dataset(cfg: SynthConfig, root: str | Path) -> Dataset:
    """Write a synthetic dataset in the on-disk format and load it back."""
    root = Path(root)
    n_test = int(round(cfg.test_fraction * cfg.num_cases))
    entries = []
    for i in range(cfg.num_cases):
        case_id = f"case_{i:03d}"
        rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, i])
        placed = _place_objects(rng, cfg)
        labels = np.zeros(cfg.dims, dtype=np.uint16)
        table, boxes, insts = {}, [], []
        for inst, (start, stop) in enumerate(placed, start=1):
            sphere = cfg.shape == "sphere" or (cfg.shape == "mixed" and rng.random() < 0.5)
            cls = int(rng.integers(0, cfg.num_classes))
            _rasterize(labels, start, stop, inst, sphere)
            table[inst] = cls
        image = rng.normal(0.0, 10.0, cfg.dims).astype(np.float32)
        for inst, cls in table.items():
            mask = labels == inst
            image[mask] += np.float32(100.0 + 50.0 * cls)
            idx = np.nonzero(mask)
            boxes.append(BoundingBox(tuple(int(v.min()) for v in idx), tuple(int(v.max()) + 1 for v in idx), cls))
            insts.append(inst)
        write_case(root, case_id, image, cfg.spacing_mm, "f32", labels, table, boxes, insts)
        entries.append((case_id, "test" if i >= cfg.num_cases - n_test else "train"))
    write_dataset_json(root, cfg.name, [f"class_{c}" for c in range(cfg.num_classes)], entries)
    return load_dataset(root)


def _clamped_normal(rng: np.random.Generator, mean_std: tuple[float, float]) -> float:
    return float(min(1.0, max(0.0, rng.normal(mean_std[0], mean_std[1]))))


def oracle_predict_patches(case: Case | Sequence[BoundingBox], grid: PatchGrid, noise: OracleNoise,
                           seed: int = 0, model: int = 0, tta: int = 0, case_id: str | None = None,
                           num_classes: int = 1) -> PatchPredictions:
    """Noisy per-patch copies of the ground truth plus Poisson false positives."""
    if isinstance(case, Case):
        gt, case_id = list(case.objects), case.id
    else:
        gt = list(case)
    case_id = case_id or "case"
    gt_arr = np.array([b.as_array() for b in gt]).reshape(-1, 6)
    gt_cls = [b.class_id for b in gt]
    dims = np.asarray(grid.dims, dtype=float)
    psize = np.asarray(grid.patch_size, dtype=float)
    if noise.fp_edge_range is not None:
        fp_lo, fp_hi = noise.fp_edge_range
    elif len(gt_arr):
        ext = gt_arr[:, 3:] - gt_arr[:, :3]
        fp_lo, fp_hi = int(ext.min()), int(ext.max())
    else:
        fp_lo, fp_hi = 2, 8

    rows, scores, classes, patches = [], [], [], []
    for pid, origin in enumerate(grid.origins):
        rng = np.random.default_rng(case_seed(seed, case_id, model, tta, pid))
        lo = np.asarray(origin, dtype=float)
        hi = np.minimum(lo + psize, dims)
        for g, box in enumerate(gt_arr):
            if np.any(np.minimum(box[3:], hi) - np.maximum(box[:3], lo) <= 0):
                continue
            if rng.random() < noise.drop_rate:
                continue
            center = (box[:3] + box[3:]) / 2 + rng.normal(0.0, noise.center_jitter_voxels, 3)
            size = (box[3:] - box[:3]) * (1.0 + rng.normal(0.0, noise.size_jitter_fraction, 3))
            size = np.maximum(size, 1.0)
            det = np.concatenate([np.maximum(center - size / 2, lo), np.minimum(center + size / 2, hi)])
            if np.any(det[3:] - det[:3] <= 0):
                continue
            rows.append(det)
            scores.append(_clamped_normal(rng, noise.score_tp))
            classes.append(gt_cls[g])
            patches.append(pid)
        for _ in range(int(rng.poisson(noise.fp_per_patch))):
            edge = rng.integers(fp_lo, fp_hi + 1, size=3).astype(float)
            edge = np.minimum(edge, hi - lo)
            start = lo + rng.random(3) * (hi - lo - edge)
            rows.append(np.concatenate([start, start + edge]))
            scores.append(_clamped_normal(rng, noise.score_fp))
            classes.append(int(rng.integers(0, max(1, num_classes))))
            patches.append(pid)

    n = len(rows)
    return PatchPredictions(
        case_id, grid,
        np.array(rows).reshape(-1, 6), np.array(scores), np.array(classes, dtype=int),
        np.full(n, model), np.array(patches, dtype=int), np.full(n, tta),
    )


def simulate_case(case: Case, patch_size: Sequence[int], noise: OracleNoise, num_models: int = 1,
                  num_tta: int = 1, seed: int = 0, overlap: float = 0.5,
                  num_classes: int = 1) -> PatchPredictions:
    """Oracle predictions of every model and TTA variant on one case."""
    grid = tile_patches(case.image.dims, patch_size, overlap)
    parts = [
        oracle_predict_patches(case, grid, noise, seed, m, t, num_classes=num_classes)
        for m in range(num_models) for t in range(num_tta)
    ]
    merged = PatchPredictions.concat(parts)
    merged.num_models, merged.num_tta = num_models, num_tta
    return merged


def synthesize_softmax(labels: np.ndarray, instance_classes: dict[int, int], num_classes: int,
                       object_score: float = 0.9) -> np.ndarray:
    """Softmax volume ``(1 + num_classes, x, y, z)`` scoring each object voxel with ``object_score``."""
    soft = np.zeros((num_classes + 1, *labels.shape), dtype=np.float32)
    soft[0] = 1.0
    for inst, cls in instance_classes.items():
        mask = labels == inst
        soft[cls + 1][mask] = object_score
        soft[0][mask] = 1.0 - object_score
    return soft
