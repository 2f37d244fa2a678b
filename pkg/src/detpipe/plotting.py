"""Figures and CSV tables for the evaluate and sweep stages.

Everything renders off-screen with the Agg backend. PNG metadata is pinned
so reruns write identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from detpipe.metrics import FROC_THRESHOLDS  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def froc_rows(points: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    return [(float(f), float(s)) for f, s in points]


def plot_froc(points: Sequence[Sequence[float]], sensitivities_at: Mapping[float, float],
              path: str | Path, cpm: float | None = None) -> Path:
    """Step FROC curve on a log2 FP axis with the seven CPM operating points marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        fp = [max(f, FROC_THRESHOLDS[0] / 2) for f, _ in points]
        ax.step(fp, [s for _, s in points], where="post", color="C0", lw=1.2, label="FROC")
        ts = sorted(sensitivities_at)
        ax.plot(ts, [sensitivities_at[t] for t in ts], "o", color="C3", ms=4, label="CPM points")
        ax.set_xscale("log", base=2)
        ax.set_xlim(FROC_THRESHOLDS[0] / 2, FROC_THRESHOLDS[-1] * 2)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false positives per scan")
        ax.set_ylabel("sensitivity")
        if cpm is not None:
            ax.set_title(f"CPM {cpm:.3f}")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_pr(curves: Mapping[str, tuple[Sequence[float], Sequence[float], float]], path: str | Path) -> Path:
    """One precision/recall line per class; ``curves[name] = (recall, precision, ap)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (name, (recall, precision, ap)) in enumerate(sorted(curves.items())):
            r = [0.0, *recall]
            p = [precision[0] if len(precision) else 0.0, *precision]
            ax.plot(r, p, color=f"C{i % 10}", lw=1.2, label=f"{name} (AP {ap:.3f})")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if curves:
            ax.legend(loc="lower left")
        return _save(fig, path)


def plot_sweep(per_parameter: Mapping[str, Sequence[Sequence]], trace: Sequence[float],
               path: str | Path) -> Path:
    """Objective per candidate for each swept parameter, and the trace after each step."""
    names = list(per_parameter)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names) + 1, figsize=(2.2 * (len(names) + 1), 2.6), squeeze=False)
        axes = axes[0]
        for ax, name in zip(axes, names):
            rows = per_parameter[name]
            labels = [str(v) for v, _ in rows]
            ax.plot(range(len(rows)), [o for _, o in rows], "o-", color="C0", ms=3, lw=1)
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels(labels, rotation=60, fontsize=7)
            ax.set_title(name, fontsize=8)
        axes[-1].plot(range(len(trace)), trace, "s-", color="C2", ms=3, lw=1)
        axes[-1].set_xticks(range(len(trace)))
        axes[-1].set_xticklabels(["init", *names][:len(trace)], rotation=60, fontsize=7)
        axes[-1].set_title("objective trace", fontsize=8)
        axes[0].set_ylabel("validation mAP@0.1")
        return _save(fig, path)
