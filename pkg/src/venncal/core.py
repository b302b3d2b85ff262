"""Domain types and loss primitives shared by every calibration routine.

Losses are represented by small frozen dataclasses (`SquaredError`,
`Pinball`, `ScorePinball`) dispatched by `loss_value`, `loss_derivative`
and `pool_minimizer`.  All three losses are convex in the prediction, and
the pinball family uses the parameterization whose population minimizer is
the (1 - alpha)-quantile of the target:

    l(q, y) = (1 - alpha) * (y - q)   if y >= q
              alpha * (q - y)         if y <  q

so the derivative with respect to q is ``alpha - 1{y >= q}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "VennCalError",
    "InvalidInputError",
    "DomainError",
    "FitError",
    "SolverError",
    "DegenerateUpdateError",
    "CalibrationWarning",
    "Continuous",
    "Categorical",
    "FeatureKind",
    "Dataset",
    "AbsResidual",
    "SquaredError",
    "Pinball",
    "ScorePinball",
    "LossSpec",
    "WeightedSample",
    "split_samples",
    "loss_value",
    "loss_derivative",
    "loss_subgradient",
    "pool_minimizer",
    "pool_subgradient",
]


class VennCalError(Exception):
    """Base class for library errors."""


class InvalidInputError(VennCalError, ValueError):
    """Non-finite or malformed inputs."""


class DomainError(VennCalError, ValueError):
    """Inputs outside an operation's domain (empty block, bad fractions, ...)."""


class FitError(VennCalError, RuntimeError):
    """A fit could not be completed (empty bin, degenerate system, ...)."""


class SolverError(FitError):
    """Iterative solver did not reach its optimality tolerance."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = float(gap)


class DegenerateUpdateError(FitError):
    """Rank-one update denominator too close to zero; refit from scratch."""


class CalibrationWarning(UserWarning):
    """Non-fatal fit adjustments (clamped bin counts, merged levels, ...)."""


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Continuous:
    pass


@dataclass(frozen=True)
class Categorical:
    levels: int

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidInputError("categorical feature needs >= 1 level")


FeatureKind = Union[Continuous, Categorical]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _require_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains NaN or infinite entries")


@dataclass(frozen=True)
class Dataset:
    """Immutable table of features, outcomes and precomputed model predictions.

    Parameters
    ----------
    features : ndarray, shape (n, p)
        Feature matrix.  Categorical columns hold integer level codes.
    y : ndarray, shape (n,)
        Outcomes in original units.
    pred_columns : mapping of str -> ndarray, shape (n,)
        Named precomputed base-model predictions f(X_i).
    feature_kinds : sequence of Continuous | Categorical
        One tag per feature column.  Defaults to all-continuous.
    """

    features: np.ndarray
    y: np.ndarray
    pred_columns: Mapping[str, np.ndarray] = field(default_factory=dict)
    feature_kinds: tuple = ()

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if feats.shape[0] == 1 and np.asarray(self.y).size != 1 and feats.shape[1] == np.asarray(self.y).size:
            feats = feats.T
        y = np.asarray(self.y, dtype=np.float64).ravel()
        n = y.shape[0]
        if n < 1:
            raise DomainError("dataset needs at least one row")
        if feats.shape[0] != n:
            raise InvalidInputError(f"features have {feats.shape[0]} rows, y has {n}")
        _require_finite("features", feats)
        _require_finite("y", y)
        kinds = tuple(self.feature_kinds) or tuple(Continuous() for _ in range(feats.shape[1]))
        if len(kinds) != feats.shape[1]:
            raise InvalidInputError("feature_kinds length must match feature count")
        for j, kind in enumerate(kinds):
            if isinstance(kind, Categorical):
                col = feats[:, j]
                if not np.all(col == np.floor(col)):
                    raise InvalidInputError(f"categorical column {j} has non-integer codes")
                if col.min() < 0 or col.max() >= kind.levels:
                    raise InvalidInputError(
                        f"categorical column {j} has codes outside [0, {kind.levels})"
                    )
        cols = {}
        for name, col in dict(self.pred_columns).items():
            col = np.asarray(col, dtype=np.float64).ravel()
            if col.shape[0] != n:
                raise InvalidInputError(f"prediction column {name!r} has wrong length")
            _require_finite(f"prediction column {name!r}", col)
            cols[name] = _readonly(col)
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "pred_columns", cols)
        object.__setattr__(self, "feature_kinds", kinds)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def pred(self, name: str) -> np.ndarray:
        try:
            return self.pred_columns[name]
        except KeyError:
            raise DomainError(f"unknown prediction column {name!r}") from None

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            features=self.features[idx],
            y=self.y[idx],
            pred_columns={k: v[idx] for k, v in self.pred_columns.items()},
            feature_kinds=self.feature_kinds,
        )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbsResidual:
    """Conformity score s(x, y) = |y - mu(x)| with mu read from a prediction column."""

    mu_column: str

    def apply(self, dataset: Dataset) -> np.ndarray:
        return np.abs(dataset.y - dataset.pred(self.mu_column))

    def of(self, y, mu):
        return np.abs(np.asarray(y, dtype=np.float64) - mu)


@dataclass(frozen=True)
class SquaredError:
    pass


@dataclass(frozen=True)
class Pinball:
    """Pinball loss at miscoverage level alpha; minimized by the (1 - alpha)-quantile."""

    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class ScorePinball:
    """Pinball loss evaluated on a conformity score in place of the raw outcome.

    The score transformation happens upstream (the conformal module feeds
    precomputed scores as the target values); at the loss level this behaves
    exactly like `Pinball(alpha)` on those scores.
    """

    alpha: float
    score: AbsResidual

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")


LossSpec = Union[SquaredError, Pinball, ScorePinball]


def _pinball_alpha(loss: LossSpec) -> float:
    if isinstance(loss, Pinball):
        return loss.alpha
    if isinstance(loss, ScorePinball):
        return loss.alpha
    raise InvalidInputError(f"not a pinball-family loss: {loss!r}")


@dataclass(frozen=True)
class WeightedSample:
    """One (prediction key, target, weight) record used in augmented fits.

    ``z`` is the outcome for SquaredError/Pinball and the conformity score
    for ScorePinball.
    """

    eta_key: float
    z: float
    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidInputError("retained samples must have weight > 0")


def split_samples(samples: Sequence[WeightedSample]):
    """Columnar (eta, z, weight) view of a list of WeightedSample."""
    eta = np.array([s.eta_key for s in samples], dtype=np.float64)
    z = np.array([s.z for s in samples], dtype=np.float64)
    w = np.array([s.weight for s in samples], dtype=np.float64)
    return eta, z, w


def _check_eta_z(eta, z) -> tuple[np.ndarray, np.ndarray]:
    eta = np.asarray(eta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _require_finite("eta", eta)
    _require_finite("z", z)
    return eta, z


def loss_value(loss: LossSpec, eta, z):
    """Evaluate l(eta, z) elementwise.

    ``z`` is the raw outcome (SquaredError, Pinball) or the precomputed
    conformity score (ScorePinball).  Always nonnegative and convex in eta.
    """
    eta, z = _check_eta_z(eta, z)
    if isinstance(loss, SquaredError):
        return (z - eta) ** 2
    alpha = _pinball_alpha(loss)
    return np.where(z >= eta, (1.0 - alpha) * (z - eta), alpha * (eta - z))


def loss_derivative(loss: LossSpec, eta, z):
    """Derivative of l with respect to eta.

    At the pinball kink (z == eta) the ``z >= eta`` branch is returned,
    i.e. alpha - 1.  Exact optimality checks should use `loss_subgradient`.
    """
    eta, z = _check_eta_z(eta, z)
    if isinstance(loss, SquaredError):
        return 2.0 * (eta - z)
    alpha = _pinball_alpha(loss)
    return alpha - (z >= eta).astype(np.float64)


def loss_subgradient(loss: LossSpec, eta, z):
    """Subgradient interval [lower, upper] of l(., z) at eta, elementwise."""
    eta, z = _check_eta_z(eta, z)
    if isinstance(loss, SquaredError):
        d = 2.0 * (eta - z)
        return d, d.copy() if isinstance(d, np.ndarray) else d
    alpha = _pinball_alpha(loss)
    lo = alpha - (z >= eta).astype(np.float64)
    hi = alpha - (z > eta).astype(np.float64)
    return lo, hi


def _as_weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.ones(n, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _require_finite("weights", w)
    if w.shape[0] != n:
        raise InvalidInputError("weights length mismatch")
    if np.any(w <= 0):
        raise InvalidInputError("weights must be positive")
    return w


def exact_pinball_rank(alpha: float, count: int) -> int:
    """1-based order-statistic index of the left-endpoint (1-alpha)-quantile.

    The smallest k with k >= (1 - alpha) * count, evaluated with exact
    rational arithmetic on the binary value of ``alpha`` - float products
    like 0.9 * 20 = 18.000000000000004 would otherwise shift the selected
    order statistic.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    k = count - math.floor(Fraction(alpha) * count)
    return min(max(k, 1), count)


def weighted_left_quantile(z: np.ndarray, w: np.ndarray, level: float) -> float:
    """Smallest minimizer of the weighted pinball objective at the given level.

    Returns the first sorted value whose cumulative weight reaches
    ``level * total_weight`` (left-endpoint convention).  Float-rounding
    sensitive near exact boundaries; the equal-weight case should go
    through `exact_pinball_rank` instead.
    """
    order = np.argsort(z, kind="stable")
    zs = z[order]
    cw = np.cumsum(w[order])
    j = int(np.searchsorted(cw, level * cw[-1], side="left"))
    return float(zs[min(j, zs.shape[0] - 1)])


def pool_minimizer(loss: LossSpec, z, weights=None) -> float:
    """argmin_c sum_i w_i l(c, z_i) for one pooled block.

    SquaredError gives the weighted mean; Pinball gives the weighted
    (1 - alpha)-quantile with the left-endpoint convention (the smallest
    point of the minimizer interval).  With equal weights the order
    statistic is selected by exact rank arithmetic.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size == 0:
        raise DomainError("pool_minimizer needs a non-empty block")
    _require_finite("z", z)
    w = _as_weights(weights, z.shape[0])
    if isinstance(loss, SquaredError):
        return float(np.sum(w * z) / np.sum(w))
    alpha = _pinball_alpha(loss)
    if np.all(w == w[0]):
        k = exact_pinball_rank(alpha, z.shape[0])
        return float(np.sort(z, kind="stable")[k - 1])
    return weighted_left_quantile(z, w, 1.0 - alpha)


def pool_subgradient(loss: LossSpec, c: float, z, weights=None) -> tuple[float, float]:
    """Subgradient interval of the pooled objective sum_i w_i l(c, z_i) at c."""
    z = np.asarray(z, dtype=np.float64).ravel()
    w = _as_weights(weights, z.shape[0])
    lo, hi = loss_subgradient(loss, np.full_like(z, float(c)), z)
    return float(np.sum(w * lo)), float(np.sum(w * hi))
