"""Evaluation metrics: coverage, width, CCE and plug-in calibration error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conformal import ConformalSet
from .core import InvalidInputError, LossSpec, loss_derivative

__all__ = ["EvalReport", "coverage_and_width", "cce", "cal_l2_plugin"]


@dataclass(frozen=True)
class EvalReport:
    """One experiment row: coverage, width, CCE and method-specific extras."""

    marginal_coverage: float
    avg_width: float
    cce: float
    per_group: tuple = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.marginal_coverage <= 1.0):
            raise InvalidInputError("coverage must lie in [0, 1]")
        if self.cce < 0.0:
            raise InvalidInputError("cce must be nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "marginal_coverage": self.marginal_coverage,
            "avg_width": self.avg_width,
            "cce": self.cce,
            "per_group": [
                {"key": k, "count": c, "coverage": cov} for (k, c, cov) in self.per_group
            ],
            "extras": dict(self.extras),
        }

    def csv_fields(self) -> dict:
        row = {
            "marginal_coverage": self.marginal_coverage,
            "avg_width": self.avg_width,
            "cce": self.cce,
        }
        row.update({f"extra_{k}": v for k, v in sorted(self.extras.items())})
        return row


def coverage_and_width(sets: list[ConformalSet], y_test) -> tuple[float, float]:
    """Fraction of outcomes inside their accepted set and the mean hull width."""
    y_test = np.asarray(y_test, dtype=np.float64).ravel()
    if len(sets) != y_test.shape[0]:
        raise InvalidInputError("sets and y_test must be aligned")
    covered = np.fromiter((s.contains(float(y)) for s, y in zip(sets, y_test)), dtype=bool)
    widths = np.array([s.width for s in sets])
    return float(covered.mean()), float(widths.mean())


def _merge_small_levels(values: np.ndarray, counts_by_level: dict, min_count: int):
    """Merge levels with < min_count points into the nearest level by value."""
    groups = [[v] for v in values]  # member original levels
    reps = list(values)  # representative value per group (count-weighted mean)
    sizes = [counts_by_level[v] for v in values]
    merged = 0
    while len(groups) > 1:
        small = [i for i, s in enumerate(sizes) if s < min_count]
        if not small:
            break
        i = small[0]
        if i == 0:
            j = 1
        elif i == len(groups) - 1:
            j = i - 1
        else:
            j = i - 1 if (reps[i] - reps[i - 1]) <= (reps[i + 1] - reps[i]) else i + 1
        a, b = min(i, j), max(i, j)
        w_a, w_b = sizes[a], sizes[b]
        reps[a] = (reps[a] * w_a + reps[b] * w_b) / (w_a + w_b)
        groups[a].extend(groups[b])
        sizes[a] = w_a + w_b
        del groups[b], reps[b], sizes[b]
        merged += 1
    return groups, merged


def cce(
    sets: list[ConformalSet],
    y_test,
    fstar_test,
    alpha: float,
    min_group: int = 5,
) -> float:
    """Conditional calibration error grouped by the calibrated threshold levels.

    ``fstar_test`` holds the isotonic calibration of the quantile model
    evaluated on the test rows; since it is a step function, conditioning
    uses its exact distinct values.  Groups with fewer than ``min_group``
    test points are merged with the nearest level.  Returns

        sum_g (n_g / n) * max(0, miscoverage_g - alpha).
    """
    y_test = np.asarray(y_test, dtype=np.float64).ravel()
    fstar = np.asarray(fstar_test, dtype=np.float64).ravel()
    if len(sets) != y_test.shape[0] or fstar.shape[0] != y_test.shape[0]:
        raise InvalidInputError("sets, y_test and fstar_test must be aligned")
    covered = np.fromiter((s.contains(float(y)) for s, y in zip(sets, y_test)), dtype=bool)
    levels = np.unique(fstar)
    counts = {float(v): int(np.sum(fstar == v)) for v in levels}
    groups, _ = _merge_small_levels(levels, counts, min_group)
    n = y_test.shape[0]
    total = 0.0
    for members in groups:
        mask = np.isin(fstar, members)
        n_g = int(mask.sum())
        miscoverage = 1.0 - float(covered[mask].mean())
        total += (n_g / n) * max(0.0, miscoverage - alpha)
    return total


def group_coverage_table(sets, y_test, group_ids):
    """(group, count, coverage) rows for reporting."""
    y_test = np.asarray(y_test, dtype=np.float64).ravel()
    gids = np.asarray(group_ids).ravel()
    covered = np.fromiter((s.contains(float(y)) for s, y in zip(sets, y_test)), dtype=bool)
    rows = []
    for g in np.unique(gids):
        mask = gids == g
        rows.append((float(g), int(mask.sum()), float(covered[mask].mean())))
    return tuple(rows)


def cal_l2_plugin(preds, z, loss: LossSpec) -> float:
    """Plug-in conditional l2 calibration error of a piecewise-constant predictor.

    Groups a large fresh evaluation sample by the distinct predicted values
    v and returns sum_v (n_v / N) * (mean of dl(v, z) within the level)^2.
    Feeding known conditional means as ``z`` (squared error) removes the
    outcome-sampling noise from the estimate.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if preds.shape != z.shape:
        raise InvalidInputError("preds and z must be aligned")
    n = preds.shape[0]
    d = loss_derivative(loss, preds, z)
    order = np.argsort(preds, kind="stable")
    sorted_preds = preds[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_preds[1:] != sorted_preds[:-1]]))
    counts = np.diff(np.append(starts, n))
    level_means = np.add.reduceat(d[order], starts) / counts
    return float(np.sum((counts / n) * level_means**2))
