"""Figure rendering for experiment reports (Agg backend, file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_band_figure", "save_coverage_figure"]

_FIGSIZE = (6.0, 3.8)
_DPI = 130
_PNG_META = {"Software": "venncal"}  # keep output byte-stable across runs


def save_band_figure(band_rows, path, method: str = "") -> Path:
    """Prediction bands (lo, hi) against the raw model prediction.

    ``band_rows`` are (x_key, lo, hi, oracle) tuples sorted by x_key, as
    written to the bands CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    if band_rows:
        arr = np.asarray(band_rows, dtype=np.float64)
        x, lo, hi, oracle = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
        finite = np.isfinite(lo) & np.isfinite(hi)
        ax.fill_between(x[finite], lo[finite], hi[finite], alpha=0.35, lw=0, label="band")
        ax.plot(x[finite], lo[finite], lw=0.7, color="C0")
        ax.plot(x[finite], hi[finite], lw=0.7, color="C0")
        ax.plot(x, oracle, ".", ms=2.5, color="C3", label="oracle")
    ax.set_xlabel("model prediction")
    ax.set_ylabel("calibrated value")
    title = "prediction bands" + (f" ({method})" if method else "")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
    return path


def save_coverage_figure(coverages, target: float, path) -> Path:
    """Per-replication coverage histogram with the nominal level marked."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    cov = np.asarray(coverages, dtype=np.float64)
    if cov.size:
        bins = max(5, min(25, cov.size // 2 + 1))
        ax.hist(cov, bins=bins, alpha=0.75, color="C0")
    ax.axvline(target, color="C3", ls="--", lw=1.2, label=f"target {target:.2f}")
    ax.set_xlabel("replication coverage")
    ax.set_ylabel("count")
    ax.set_title("coverage across replications")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
    return path
