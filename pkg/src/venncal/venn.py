"""Set calibration: Venn and Venn-Abers prediction sets.

For a query with raw prediction ``x_pred``, every candidate outcome y from
an imputation grid is appended to the calibration data, the point
calibrator is refit on the augmented set, and the refit is evaluated at
``x_pred``.  The collected values form the Venn prediction set; the entry
at the true outcome is the oracle prediction, which is marginally
calibrated under exchangeability.

Augmented refits share presorted layouts so a full grid sweep costs one
sort plus O(n) per grid value instead of O(n log n); results are bitwise
identical to refitting from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _pava
from .calibrators import (
    BinningConfig,
    StepCalibrator,
    histogram_calibrate,
    isotonic_calibrate,
    uniform_mass_bins,
)
from .core import (
    DomainError,
    InvalidInputError,
    LossSpec,
    SquaredError,
    _as_weights,
    _pinball_alpha,
    _require_finite,
    pool_minimizer,
)

__all__ = [
    "ImputationGrid",
    "VennSet",
    "VennTable",
    "Histogram",
    "Isotonic",
    "CalibratorAlgo",
    "venn_calibrate",
    "venn_abers",
    "oracle_prediction",
    "venn_batch",
    "check_monotone_in_imputation",
]


@dataclass(frozen=True)
class ImputationGrid:
    """Sorted candidate outcomes (or scores) imputed for the query point."""

    values: np.ndarray
    construction: str = "explicit"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        _require_finite("grid values", v)
        v = np.unique(v)
        if v.shape[0] < 1:
            raise DomainError("imputation grid is empty")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @classmethod
    def equal_frequency(cls, outcomes, m: int = 200) -> "ImputationGrid":
        """m rank-equispaced order statistics of the observed outcomes.

        Always includes the observed min and max so the grid envelope
        brackets extreme imputations.
        """
        if m < 2:
            raise DomainError("equal-frequency grid needs m >= 2")
        ys = np.sort(np.asarray(outcomes, dtype=np.float64).ravel())
        if ys.size == 0:
            raise DomainError("no outcomes to build a grid from")
        idx = np.round(np.linspace(0, ys.shape[0] - 1, num=min(m, ys.shape[0]))).astype(int)
        return cls(values=ys[idx], construction="equal_frequency")

    @classmethod
    def explicit(cls, values) -> "ImputationGrid":
        return cls(values=np.asarray(values, dtype=np.float64), construction="explicit")

    @classmethod
    def extremes(cls, y_min: float, y_max: float) -> "ImputationGrid":
        if not y_min < y_max:
            raise DomainError("extremes grid needs y_min < y_max")
        return cls(values=np.array([y_min, y_max]), construction="extremes")


@dataclass(frozen=True)
class VennSet:
    """The multiset of calibrated predictions over an imputation grid."""

    x_key: float
    imputed_y: np.ndarray
    predictions: np.ndarray

    def __post_init__(self):
        iy = np.asarray(self.imputed_y, dtype=np.float64).ravel()
        pr = np.asarray(self.predictions, dtype=np.float64).ravel()
        if iy.shape != pr.shape or iy.shape[0] < 1:
            raise InvalidInputError("imputed_y and predictions must be aligned, non-empty")
        if np.any(np.diff(iy) < 0):
            raise InvalidInputError("entries must be ordered by imputed_y")
        object.__setattr__(self, "imputed_y", iy)
        object.__setattr__(self, "predictions", pr)

    @property
    def lo(self) -> float:
        return float(self.predictions.min())

    @property
    def hi(self) -> float:
        return float(self.predictions.max())

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def entries(self):
        return list(zip(self.imputed_y.tolist(), self.predictions.tolist()))

    def entry_for(self, y: float) -> float:
        """Prediction at an exactly matching imputed outcome."""
        i = np.flatnonzero(self.imputed_y == float(y))
        if i.size == 0:
            raise DomainError(f"imputed outcome {y} is not on the grid")
        return float(self.predictions[i[0]])

    def contains(self, value: float, atol: float = 0.0) -> bool:
        return bool(np.any(np.abs(self.predictions - value) <= atol))

    def to_json_dict(self) -> dict:
        return {
            "x_key": self.x_key,
            "entries": [
                {"imputed_y": float(a), "prediction": float(b)}
                for a, b in zip(self.imputed_y, self.predictions)
            ],
            "lo": self.lo,
            "hi": self.hi,
        }


# ---------------------------------------------------------------------------
# point-calibration algorithms usable inside the Venn loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    """Uniform-mass histogram binning with a fixed bin count."""

    config: BinningConfig

    def fit(self, loss: LossSpec, preds, z, weights=None) -> StepCalibrator:
        import warnings as _warnings

        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore")
            edges = uniform_mass_bins(preds, self.config)
        return histogram_calibrate(loss, preds, z, edges, weights)


@dataclass(frozen=True)
class Isotonic:
    """Generalized isotonic regression (adaptive bins)."""

    def fit(self, loss: LossSpec, preds, z, weights=None) -> StepCalibrator:
        return isotonic_calibrate(loss, preds, z, weights)


CalibratorAlgo = Histogram | Isotonic


class _AugmentedIsotonic:
    """Shared presorted layout for isotonic refits on C_n + {(x_pred, y)}.

    Produces values bitwise-equal to `isotonic_calibrate` on the augmented
    arrays with the query sample appended last.
    """

    def __init__(self, loss: LossSpec, cal_preds, cal_z, weights=None):
        self.loss = loss
        preds = np.asarray(cal_preds, dtype=np.float64).ravel()
        z = np.asarray(cal_z, dtype=np.float64).ravel()
        w = _as_weights(weights, z.shape[0])
        self.uniq, self.offsets, self.zs, self.ws, _ = _pava.sorted_layout(preds, z, w)
        self.n = z.shape[0]
        g_max = self.uniq.shape[0] + 1
        self._aug_z = np.empty(self.n + 1, dtype=np.float64)
        self._aug_w = np.empty(self.n + 1, dtype=np.float64)
        self._ws = _pava.QuantileWorkspace(self.n + 1, g_max)
        if isinstance(loss, SquaredError):
            self._k_table = None
        else:
            self._k_table = _pava.rank_table(_pinball_alpha(loss), self.n + 1)

    def _augment(self, x_pred: float, y: float, weight: float = 1.0):
        lo_g = int(np.searchsorted(self.uniq, x_pred, side="left"))
        hi_g = int(np.searchsorted(self.uniq, x_pred, side="right"))
        if lo_g == hi_g:  # new prediction value: insert a singleton group
            pos = int(self.offsets[lo_g])
            offsets = np.empty(self.offsets.shape[0] + 1, dtype=np.int64)
            offsets[: lo_g + 1] = self.offsets[: lo_g + 1]
            offsets[lo_g + 1] = self.offsets[lo_g] + 1
            offsets[lo_g + 2 :] = self.offsets[lo_g + 1 :] + 1
            g_x = lo_g
        else:  # ties pool with the existing group, value-sorted, appended-last stability
            s, e = int(self.offsets[lo_g]), int(self.offsets[lo_g + 1])
            pos = s + int(np.searchsorted(self.zs[s:e], y, side="right"))
            offsets = self.offsets.copy()
            offsets[lo_g + 1 :] += 1
            g_x = lo_g
        az, aw = self._aug_z, self._aug_w
        az[:pos] = self.zs[:pos]
        az[pos] = y
        az[pos + 1 :] = self.zs[pos:]
        aw[:pos] = self.ws[:pos]
        aw[pos] = weight
        aw[pos + 1 :] = self.ws[pos:]
        return offsets, g_x

    def fit_eval(self, x_pred: float, y: float, weight: float = 1.0) -> float:
        offsets, g_x = self._augment(x_pred, y, weight)
        if isinstance(self.loss, SquaredError):
            gstart, vals = _pava.run_pava_mean(offsets, self._aug_z, self._aug_w)
        else:
            gstart, vals = _pava.run_pava_quantile(
                offsets,
                self._aug_z,
                self._aug_w,
                _pinball_alpha(self.loss),
                self._ws,
                self._k_table,
            )
        b = int(np.searchsorted(gstart, g_x, side="right")) - 1
        return float(vals[b])


class _AugmentedHistogram:
    """Histogram refits on C_n + {(x_pred, y)}; only the query's bin changes with y."""

    def __init__(self, algo: Histogram, loss: LossSpec, cal_preds, cal_z, weights=None):
        self.loss = loss
        self.algo = algo
        self.preds = np.asarray(cal_preds, dtype=np.float64).ravel()
        self.z = np.asarray(cal_z, dtype=np.float64).ravel()
        self.w = _as_weights(weights, self.z.shape[0])
        self._cache_key = None

    def _prepare(self, x_pred: float):
        if self._cache_key == x_pred:
            return
        import warnings as _warnings

        aug_preds = np.append(self.preds, x_pred)
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore")
            edges = uniform_mass_bins(aug_preds, self.algo.config)
        j = int(np.searchsorted(edges, x_pred, side="right"))
        mask = np.searchsorted(edges, self.preds, side="right") == j
        self._bin_z = self.z[mask]
        self._bin_w = self.w[mask]
        self._cache_key = x_pred

    def fit_eval(self, x_pred: float, y: float, weight: float = 1.0) -> float:
        self._prepare(x_pred)
        return pool_minimizer(
            self.loss, np.append(self._bin_z, y), np.append(self._bin_w, weight)
        )


def _make_fitter(algo: CalibratorAlgo, loss, cal_preds, cal_z, weights):
    if isinstance(algo, Isotonic):
        return _AugmentedIsotonic(loss, cal_preds, cal_z, weights)
    if isinstance(algo, Histogram):
        return _AugmentedHistogram(algo, loss, cal_preds, cal_z, weights)
    raise InvalidInputError(f"unknown calibrator algorithm {algo!r}")


def venn_calibrate(
    algo: CalibratorAlgo,
    loss: LossSpec,
    cal_preds,
    cal_z,
    x_pred: float,
    grid: ImputationGrid,
    weights=None,
) -> VennSet:
    """Venn set calibration: refit on C_n + {(x_pred, y)} for every grid y.

    Parameters
    ----------
    algo : Histogram | Isotonic
        In-sample calibrating point algorithm applied to each augmented set.
    cal_preds, cal_z : arrays of shape (n,)
        Calibration predictions and targets (outcomes or scores).
    x_pred : float
        Raw model prediction of the query point.
    grid : ImputationGrid
        Candidate outcomes imputed for the query.

    Returns
    -------
    VennSet with one (imputed_y, prediction) entry per grid value.
    """
    if not np.isfinite(x_pred):
        raise InvalidInputError("x_pred must be finite")
    fitter = _make_fitter(algo, loss, cal_preds, cal_z, weights)
    preds_out = np.empty(grid.m, dtype=np.float64)
    for i, y in enumerate(grid.values):
        try:
            preds_out[i] = fitter.fit_eval(float(x_pred), float(y))
        except Exception as exc:
            raise type(exc)(f"grid point y={y}: {exc}") from exc
    return VennSet(x_key=float(x_pred), imputed_y=grid.values, predictions=preds_out)


def venn_abers(
    loss: LossSpec, cal_preds, cal_z, x_pred: float, grid: ImputationGrid, weights=None
) -> VennSet:
    """Venn calibration specialized to isotonic regression."""
    return venn_calibrate(Isotonic(), loss, cal_preds, cal_z, x_pred, grid, weights)


def oracle_prediction(
    algo: CalibratorAlgo,
    loss: LossSpec,
    cal_preds,
    cal_z,
    x_pred: float,
    y_true: float,
    weights=None,
) -> float:
    """Calibrated prediction from the oracle-augmented set C_n + {(x_pred, y_true)}.

    Computed by a direct refit (not the shared-layout sweep), so equality
    with the matching `VennSet` entry is a genuine cross-check.
    """
    if not np.isfinite(y_true):
        raise InvalidInputError("y_true must be finite")
    cal_preds = np.asarray(cal_preds, dtype=np.float64).ravel()
    cal_z = np.asarray(cal_z, dtype=np.float64).ravel()
    w = _as_weights(weights, cal_z.shape[0])
    aug_preds = np.append(cal_preds, float(x_pred))
    aug_z = np.append(cal_z, float(y_true))
    aug_w = np.append(w, 1.0)
    calib = algo.fit(loss, aug_preds, aug_z, aug_w)
    return float(calib(float(x_pred)))


@dataclass(frozen=True)
class VennTable:
    """Venn sets computed exactly on a prediction grid, with NN lookup."""

    keys: np.ndarray
    sets: tuple
    grid: ImputationGrid

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.float64).ravel()
        if keys.shape[0] == 0:
            raise DomainError("venn_batch needs a non-empty prediction grid")
        if np.any(np.diff(keys) < 0):
            raise InvalidInputError("prediction grid must be sorted")
        object.__setattr__(self, "keys", keys)

    def lookup_index(self, x_pred: float) -> int:
        """Index of the nearest grid key; distance ties go to the lower key."""
        pos = int(np.searchsorted(self.keys, x_pred))
        if pos == 0:
            return 0
        if pos == self.keys.shape[0]:
            return pos - 1
        d_left = x_pred - self.keys[pos - 1]
        d_right = self.keys[pos] - x_pred
        return pos - 1 if d_left <= d_right else pos

    def lookup(self, x_pred: float) -> VennSet:
        return self.sets[self.lookup_index(x_pred)]

    def to_json_dict(self) -> dict:
        return {"keys": self.keys.tolist(), "sets": [s.to_json_dict() for s in self.sets]}

    def rows(self):
        """Flat (x_key, imputed_y, prediction) rows for CSV export."""
        for s in self.sets:
            for y, p in zip(s.imputed_y, s.predictions):
                yield (s.x_key, float(y), float(p))


def venn_batch(
    algo: CalibratorAlgo,
    loss: LossSpec,
    cal_preds,
    cal_z,
    pred_grid,
    grid: ImputationGrid,
    weights=None,
) -> VennTable:
    """Exact Venn sets at each prediction-grid key, for nearest-neighbor reuse.

    The table approximates per-query Venn calibration across the whole
    prediction space; `lookup` returns the set of the nearest key.
    """
    pred_grid = np.asarray(pred_grid, dtype=np.float64).ravel()
    if pred_grid.size == 0:
        raise DomainError("venn_batch needs a non-empty prediction grid")
    fitter = _make_fitter(algo, loss, cal_preds, cal_z, weights)
    sets = []
    for key in pred_grid:
        preds_out = np.empty(grid.m, dtype=np.float64)
        for i, y in enumerate(grid.values):
            preds_out[i] = fitter.fit_eval(float(key), float(y))
        sets.append(VennSet(x_key=float(key), imputed_y=grid.values, predictions=preds_out))
    return VennTable(keys=pred_grid, sets=tuple(sets), grid=grid)


def check_monotone_in_imputation(
    algo: CalibratorAlgo,
    loss: LossSpec,
    cal_preds,
    cal_z,
    x_pred: float,
    subgrid: ImputationGrid,
    weights=None,
) -> bool:
    """Empirically test whether y -> f^{(x,y)}(x) is nondecreasing on a subgrid.

    Extremes-only evaluation is valid only when this map is monotone; the
    property is not guaranteed for general losses, so it is checked, never
    assumed.
    """
    vs = venn_calibrate(algo, loss, cal_preds, cal_z, x_pred, subgrid, weights)
    return bool(np.all(np.diff(vs.predictions) >= 0))
