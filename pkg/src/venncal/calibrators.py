"""Point calibrators producing in-sample calibrated step functions.

Both calibrators return a `StepCalibrator`: a right-continuous piecewise
constant map from raw predictions to calibrated values.  Histogram binning
uses outcome-agnostic uniform-mass bins; `isotonic_calibrate` solves the
generalized isotonic regression problem

    min sum_i w_i * l(theta(pred_i), z_i)   over nondecreasing step theta

by pool-adjacent-violators, where merged blocks take `pool_minimizer`.
Samples with equal predictions are pooled into a single block before the
PAVA pass, so the solution is the cadlag representative with jumps only at
observed prediction values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _pava
from .core import (
    CalibrationWarning,
    DomainError,
    FitError,
    InvalidInputError,
    LossSpec,
    Pinball,
    ScorePinball,
    SquaredError,
    _as_weights,
    _pinball_alpha,
    _require_finite,
    loss_subgradient,
    loss_value,
    pool_minimizer,
)

__all__ = [
    "StepCalibrator",
    "BinningConfig",
    "uniform_mass_bins",
    "histogram_calibrate",
    "isotonic_calibrate",
    "check_in_sample_calibration",
    "LevelReport",
    "InSampleReport",
]


@dataclass(frozen=True)
class StepCalibrator:
    """Right-continuous step function theta: prediction -> calibrated value.

    ``theta(t) = values[j]`` for ``t`` in ``[breakpoints[j-1], breakpoints[j])``
    with the convention breakpoints[-1] = -inf and breakpoints[K-1] = +inf.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    monotone: bool = False
    fit_keys: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64).ravel()
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.shape[0] < 1:
            raise InvalidInputError("step calibrator needs at least one value")
        if bp.shape[0] != vals.shape[0] - 1:
            raise InvalidInputError("need exactly len(values) - 1 breakpoints")
        if bp.shape[0] and np.any(np.diff(bp) <= 0):
            raise InvalidInputError("breakpoints must be strictly increasing")
        _require_finite("values", vals)
        _require_finite("breakpoints", bp)
        if self.monotone and np.any(np.diff(vals) < 0):
            raise InvalidInputError("monotone calibrator has decreasing values")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        keys = self.fit_keys
        if keys is not None:
            keys = np.asarray(keys, dtype=np.float64).ravel()
        object.__setattr__(self, "fit_keys", keys)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = self.values[idx]
        return float(out) if np.ndim(t) == 0 else out

    @property
    def num_levels(self) -> int:
        return self.values.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
            "monotone": bool(self.monotone),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StepCalibrator":
        return cls(
            breakpoints=np.asarray(d["breakpoints"], dtype=np.float64),
            values=np.asarray(d["values"], dtype=np.float64),
            monotone=bool(d.get("monotone", False)),
        )


@dataclass(frozen=True)
class BinningConfig:
    """Uniform-mass (quantile) binning with a fixed number of bins."""

    num_bins: int
    scheme: str = "uniform_mass"

    def __post_init__(self):
        if self.num_bins < 1:
            raise InvalidInputError("num_bins must be >= 1")
        if self.scheme != "uniform_mass":
            raise InvalidInputError(f"unknown binning scheme {self.scheme!r}")


def uniform_mass_bins(preds, config: BinningConfig) -> np.ndarray:
    """Bin edges at empirical j/K quantiles of the predictions.

    Edges sit at midpoints between the adjacent order statistics straddling
    each j/K quantile, so bin membership (right-continuous) is exact and
    reproducible.  K is clamped to the number of distinct predictions, and
    edges that would leave a bin with no fit point are dropped; both
    adjustments emit a `CalibrationWarning`.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    if preds.size == 0:
        raise DomainError("uniform_mass_bins needs a non-empty prediction vector")
    _require_finite("preds", preds)
    ps = np.sort(preds)
    n = ps.shape[0]
    k = config.num_bins
    n_distinct = np.unique(ps).shape[0]
    if k > n_distinct:
        warnings.warn(
            f"num_bins={k} exceeds {n_distinct} distinct predictions; clamping",
            CalibrationWarning,
            stacklevel=2,
        )
        k = n_distinct
    if k == 1:
        return np.empty(0, dtype=np.float64)
    cuts = np.floor(n * np.arange(1, k) / k).astype(int)
    cuts = np.clip(cuts, 1, n - 1)
    edges = np.unique((ps[cuts - 1] + ps[cuts]) / 2.0)
    # drop edges bounding empty bins (possible under heavy ties)
    dropped = False
    while edges.shape[0]:
        counts = np.bincount(
            np.searchsorted(edges, preds, side="right"), minlength=edges.shape[0] + 1
        )
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        edges = np.delete(edges, max(j - 1, 0))
        dropped = True
    if dropped:
        warnings.warn(
            f"removed bin edges producing empty bins; effective K={edges.shape[0] + 1}",
            CalibrationWarning,
            stacklevel=2,
        )
    return edges


def histogram_calibrate(loss: LossSpec, preds, z, edges, weights=None) -> StepCalibrator:
    """Fit the histogram (binning) calibrator: per-bin pooled loss minimizers."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if preds.shape[0] != z.shape[0]:
        raise InvalidInputError("preds and z must be aligned")
    _require_finite("preds", preds)
    _require_finite("z", z)
    w = _as_weights(weights, z.shape[0])
    edges = np.asarray(edges, dtype=np.float64).ravel()
    idx = np.searchsorted(edges, preds, side="right")
    k = edges.shape[0] + 1
    values = np.empty(k, dtype=np.float64)
    for j in range(k):
        mask = idx == j
        if not np.any(mask):
            raise FitError(f"bin {j} contains no fit points")
        values[j] = pool_minimizer(loss, z[mask], w[mask])
    return StepCalibrator(
        breakpoints=edges, values=values, monotone=False, fit_keys=np.unique(preds)
    )


def isotonic_calibrate(loss: LossSpec, preds, z, weights=None) -> StepCalibrator:
    """Generalized isotonic regression via pool-adjacent-violators.

    Returns the nondecreasing step minimizer of the weighted empirical risk;
    equal predictions are pooled first, and final block values are strictly
    increasing.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if preds.shape[0] != z.shape[0]:
        raise InvalidInputError("preds and z must be aligned")
    if preds.shape[0] == 0:
        raise DomainError("isotonic_calibrate needs at least one sample")
    _require_finite("preds", preds)
    _require_finite("z", z)
    w = _as_weights(weights, z.shape[0])
    uniq, offsets, zs, ws, _ = _pava.sorted_layout(preds, z, w)
    if isinstance(loss, SquaredError):
        gstart, vals = _pava.run_pava_mean(offsets, zs, ws)
    elif isinstance(loss, (Pinball, ScorePinball)):
        gstart, vals = _pava.run_pava_quantile(offsets, zs, ws, _pinball_alpha(loss))
    else:
        raise InvalidInputError(f"unsupported loss {loss!r}")
    # jump at the first observed prediction of each block after the first
    breakpoints = uniq[gstart[1:]]
    return StepCalibrator(breakpoints=breakpoints, values=vals, monotone=True, fit_keys=uniq)


@dataclass(frozen=True)
class LevelReport:
    """First-order condition at one level set of the fitted step function."""

    value: float
    count: int
    weight: float
    derivative_sum: float
    subgrad_lo: float
    subgrad_hi: float
    passed: bool


@dataclass(frozen=True)
class InSampleReport:
    levels: tuple
    passed: bool
    empirical_risk: float

    def failing_levels(self):
        return [lv for lv in self.levels if not lv.passed]


def check_in_sample_calibration(
    loss: LossSpec, calibrator: StepCalibrator, preds, z, weights=None, se_tol: float = 1e-8
) -> InSampleReport:
    """Verify the empirical first-order conditions of a fitted calibrator.

    For every distinct output value v the weighted derivative sum
    ``D(v) = sum_{theta(pred_i)=v} w_i dl(v, z_i)`` and the corresponding
    subgradient interval are reported.  Squared error passes when
    ``|D(v)| <= se_tol``; pinball passes when 0 lies in the interval, with
    eps-scale slack for boundary cases where alpha * weight is an exact
    count (the interval endpoints are then zero only in real arithmetic).
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    w = _as_weights(weights, z.shape[0])
    fitted = calibrator(preds)
    lo, hi = loss_subgradient(loss, fitted, z)
    d = (lo + hi) / 2.0 if isinstance(loss, SquaredError) else lo
    levels = []
    for v in np.unique(fitted):
        mask = fitted == v
        d_sum = float(np.sum(w[mask] * d[mask]))
        lo_s = float(np.sum(w[mask] * lo[mask]))
        hi_s = float(np.sum(w[mask] * hi[mask]))
        if isinstance(loss, SquaredError):
            ok = abs(d_sum) <= se_tol
        else:
            slack = 1e-12 * (1.0 + float(np.sum(w[mask])))
            ok = lo_s <= slack and hi_s >= -slack
        levels.append(
            LevelReport(
                value=float(v),
                count=int(np.sum(mask)),
                weight=float(np.sum(w[mask])),
                derivative_sum=d_sum,
                subgrad_lo=lo_s,
                subgrad_hi=hi_s,
                passed=ok,
            )
        )
    risk = float(np.sum(w * loss_value(loss, fitted, z)))
    return InSampleReport(
        levels=tuple(levels), passed=all(lv.passed for lv in levels), empirical_risk=risk
    )
