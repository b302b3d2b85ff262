"""Conformal prediction intervals from Venn quantile calibration.

Acceptance rule: a candidate outcome y is kept when its conformity score
s(x, y) = |y - mu(x)| does not exceed the calibrated quantile threshold
refit on the calibration data augmented with (x, s(x, y)).  Score/threshold
ties are accepted (closed inequality) and recorded, keeping the coverage
guarantee direction safe when the no-tie assumption fails.

`marginal_baseline` and `mondrian_baseline` are the classical split
conformal special cases (constant and group-indicator function classes);
the Venn variants reduce to them exactly on matching inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    DomainError,
    InvalidInputError,
    Pinball,
    _require_finite,
    exact_pinball_rank,
)
from .multical import DesignMatrix, QuantileSolverConfig, fit_offset_quantile
from .venn import CalibratorAlgo, _make_fitter

__all__ = [
    "ConformalSet",
    "GroupingSpec",
    "venn_cp_interval",
    "multical_cp_interval",
    "marginal_baseline",
    "mondrian_baseline",
    "prediction_bin_groups",
    "symmetric_y_grid",
]


@dataclass(frozen=True)
class ConformalSet:
    """Accepted outcomes as disjoint closed intervals plus their hull."""

    alpha: float
    intervals: tuple
    grid_members: np.ndarray = field(default_factory=lambda: np.empty(0))
    tie_events: tuple = ()

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError("alpha must lie in (0, 1)")
        ivals = tuple((float(a), float(b)) for a, b in self.intervals)
        for a, b in ivals:
            if a > b:
                raise InvalidInputError("interval lower bound exceeds upper bound")
        if any(ivals[i][1] >= ivals[i + 1][0] for i in range(len(ivals) - 1)):
            raise InvalidInputError("intervals must be disjoint and sorted")
        object.__setattr__(self, "intervals", ivals)
        object.__setattr__(
            self, "grid_members", np.asarray(self.grid_members, dtype=np.float64).ravel()
        )

    @property
    def is_empty(self) -> bool:
        return len(self.intervals) == 0

    @property
    def hull(self):
        if self.is_empty:
            return None
        return (self.intervals[0][0], self.intervals[-1][1])

    @property
    def width(self) -> float:
        """Hull width; 0 for an empty set, inf for an unbounded hull."""
        if self.is_empty:
            return 0.0
        lo, hi = self.hull
        return hi - lo

    def contains(self, y: float) -> bool:
        return any(a <= y <= b for a, b in self.intervals)

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "intervals": [list(iv) for iv in self.intervals],
            "hull": list(self.hull) if self.hull is not None else None,
            "tie_events": list(self.tie_events),
        }

    @classmethod
    def from_grid(cls, alpha: float, y_grid: np.ndarray, accepted: np.ndarray, ties=()):
        """Assemble maximal runs of accepted grid cells into closed intervals."""
        y_grid = np.asarray(y_grid, dtype=np.float64)
        accepted = np.asarray(accepted, dtype=bool)
        intervals = []
        start = None
        for i, ok in enumerate(accepted):
            if ok and start is None:
                start = i
            elif not ok and start is not None:
                intervals.append((y_grid[start], y_grid[i - 1]))
                start = None
        if start is not None:
            intervals.append((y_grid[start], y_grid[-1]))
        return cls(
            alpha=alpha,
            intervals=tuple(intervals),
            grid_members=y_grid[accepted],
            tie_events=tuple(ties),
        )


@dataclass(frozen=True)
class GroupingSpec:
    """Mondrian grouping: none (marginal) or K uniform-mass prediction bins."""

    kind: str = "none"
    num_bins: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "prediction_bins"):
            raise InvalidInputError(f"unknown grouping kind {self.kind!r}")
        if self.num_bins < 1:
            raise InvalidInputError("num_bins must be >= 1")


def prediction_bin_groups(cal_preds, num_bins: int):
    """Uniform-mass bin edges over predictions and a group-id assigner."""
    import warnings as _warnings

    from .calibrators import BinningConfig, uniform_mass_bins

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        edges = uniform_mass_bins(cal_preds, BinningConfig(num_bins))

    def assign(preds):
        return np.searchsorted(edges, np.asarray(preds, dtype=np.float64), side="right")

    return edges, assign


def symmetric_y_grid(x_mu: float, max_score: float, num: int = 200) -> np.ndarray:
    """Candidate outcomes symmetric around mu(x) covering scores up to max_score."""
    if num < 2:
        raise DomainError("y grid needs at least 2 points")
    half = np.linspace(0.0, max_score, num=num // 2 + 1)
    return np.unique(np.concatenate([x_mu - half, x_mu + half]))


def venn_cp_interval(
    cal_quantile_preds,
    cal_scores,
    algo: CalibratorAlgo,
    alpha: float,
    x_quantile_pred: float,
    x_mu: float,
    y_grid,
) -> ConformalSet:
    """Venn CP: accept y when s(x,y) <= the augmented quantile calibration at x.

    For each candidate y the quantile model's predictions are calibrated
    under the pinball loss on the scores augmented with (x, s(x, y)), and y
    is accepted iff s(x, y) is at most the calibrated threshold at
    ``x_quantile_pred``.  Ties accept and are recorded.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0, 1)")
    y_grid = np.asarray(y_grid, dtype=np.float64).ravel()
    if y_grid.size == 0:
        raise DomainError("y_grid is empty")
    _require_finite("y_grid", y_grid)
    cal_scores = np.asarray(cal_scores, dtype=np.float64).ravel()
    fitter = _make_fitter(algo, Pinball(alpha), cal_quantile_preds, cal_scores, None)
    accepted = np.zeros(y_grid.shape[0], dtype=bool)
    ties = []
    for i, y in enumerate(y_grid):
        s = abs(float(y) - float(x_mu))
        thr = fitter.fit_eval(float(x_quantile_pred), s)
        accepted[i] = s <= thr
        if s == thr:
            ties.append(float(y))
    return ConformalSet.from_grid(alpha, y_grid, accepted, ties)


def multical_cp_interval(
    design: DesignMatrix,
    x_basis_row,
    cal_scores,
    alpha: float,
    x_mu: float,
    y_grid,
    quantile_offsets=None,
    x_offset: float = 0.0,
    solver: QuantileSolverConfig = QuantileSolverConfig(),
) -> ConformalSet:
    """Multicalibrated CP: accept y iff s(x,y) <= f(x) + g^{(x,y)}(x).

    ``design`` is the basis evaluated on the calibration rows and
    ``x_basis_row`` its expansion at the query.  ``quantile_offsets`` are
    the quantile model values f(X_i) (zero for the pure conditional-CP
    form), with ``x_offset`` = f(x).
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0, 1)")
    y_grid = np.asarray(y_grid, dtype=np.float64).ravel()
    if y_grid.size == 0:
        raise DomainError("y_grid is empty")
    scores = np.asarray(cal_scores, dtype=np.float64).ravel()
    offsets = (
        np.zeros_like(scores)
        if quantile_offsets is None
        else np.asarray(quantile_offsets, dtype=np.float64).ravel()
    )
    if offsets.shape != scores.shape:
        raise InvalidInputError("quantile_offsets must align with cal_scores")
    phi_x = np.asarray(x_basis_row, dtype=np.float64).ravel()
    phi_aug = np.vstack([design.values, phi_x])
    design_aug = DesignMatrix(values=phi_aug, column_names=design.column_names)
    r_aug = np.append(scores - offsets, 0.0)
    accepted = np.zeros(y_grid.shape[0], dtype=bool)
    ties = []
    for i, y in enumerate(y_grid):
        s = abs(float(y) - float(x_mu))
        r_aug[-1] = s - float(x_offset)
        try:
            fit_y = fit_offset_quantile(r_aug, design_aug, alpha, solver)
        except Exception as exc:
            raise type(exc)(f"grid point y={y}: {exc}") from exc
        thr = float(x_offset) + float(phi_x @ fit_y.beta)
        accepted[i] = s <= thr
        if s == thr:
            ties.append(float(y))
    return ConformalSet.from_grid(alpha, y_grid, accepted, ties)


def conformal_quantile(cal_scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th order statistic of the scores, +inf if beyond n.

    The index is evaluated with exact rank arithmetic (see
    `exact_pinball_rank`), so boundary cases like alpha = 0.1, n = 99 select
    exactly the 90th of 100 hypothetical augmented positions.
    """
    scores = np.asarray(cal_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise DomainError("need at least one calibration score")
    _require_finite("cal_scores", scores)
    n = scores.shape[0]
    k = exact_pinball_rank(alpha, n + 1)
    if k > n:
        return float("inf")
    return float(np.sort(scores)[k - 1])


def marginal_baseline(cal_scores, alpha: float, x_mu: float) -> ConformalSet:
    """Standard split CP interval [mu(x) - q, mu(x) + q]."""
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0, 1)")
    q = conformal_quantile(cal_scores, alpha)
    return ConformalSet(alpha=alpha, intervals=((float(x_mu) - q, float(x_mu) + q),))


def mondrian_baseline(
    cal_scores, group_ids, alpha: float, x_group: int, x_mu: float
) -> ConformalSet:
    """Split CP restricted to the query's group (group-conditional coverage)."""
    scores = np.asarray(cal_scores, dtype=np.float64).ravel()
    gids = np.asarray(group_ids).ravel()
    if gids.shape != scores.shape:
        raise InvalidInputError("group_ids must align with cal_scores")
    mask = gids == x_group
    if not np.any(mask):
        raise DomainError(f"group {x_group!r} has no calibration members")
    return marginal_baseline(scores[mask], alpha, x_mu)
