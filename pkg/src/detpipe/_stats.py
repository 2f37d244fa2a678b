"""Order statistics shared by every module (one percentile rule artifact-wide)."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def nearest_rank_index(q: float, n: int) -> int:
    """Zero-based index of the nearest-rank ``q``-quantile in a sorted sample of size ``n``.

    ``q`` is a fraction in [0, 1]; rank = ceil(q * n), clamped to [1, n].
    """
    if n <= 0:
        raise ValueError("percentile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile must be in [0, 1], got {q}")
    # round away float noise such as 0.95 * 20 = 19.000000000000004
    rank = math.ceil(round(q * n, 9))
    return min(max(rank, 1), n) - 1


def nearest_rank(values: Sequence[float] | np.ndarray, q: float) -> float:
    ordered = np.sort(np.asarray(values, dtype=float).ravel())
    return float(ordered[nearest_rank_index(q, ordered.size)])


def nearest_rank_many(values: Sequence[float] | np.ndarray, qs: Sequence[float]) -> list[float]:
    ordered = np.sort(np.asarray(values, dtype=float).ravel())
    return [float(ordered[nearest_rank_index(q, ordered.size)]) for q in qs]
