"""Synthetic data generators with exact conditional oracles.

Both generators share the feature layout (one continuous feature on
[-2, 2], one 3-level categorical) and emit, alongside the outcome:

* ``f``        - deliberately miscalibrated mean model 0.8*m(x) + 0.1
* ``mu``       - the centering predictor for conformity scores
* ``score_q``  - the true (1 - alpha)-quantile of |Y - mu(X)| given X
* ``score_q_miscal`` - 0.8*score_q + 0.1, the miscalibrated quantile model

`hetero-gauss` has Gaussian noise whose scale grows with the continuous
feature; `skew-gamma` has centered gamma noise, so mean-targeting models
are biased when fit to the median and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from ..core import Categorical, Continuous, Dataset, DomainError, InvalidInputError

__all__ = ["SyntheticDGP", "HeteroGaussDGP", "SkewGammaDGP", "make_dgp", "gen_synthetic"]

_GROUP_PROBS = np.array([0.5, 0.3, 0.2])
_GROUP_OFFSETS = np.array([0.0, 1.5, -1.0])
_MEAN_COEFS = (1.0, 1.2, 0.6)


def _mean_fn(x0: np.ndarray, g: np.ndarray) -> np.ndarray:
    b0, b1, b2 = _MEAN_COEFS
    return b0 + b1 * x0 + b2 * x0**2 + _GROUP_OFFSETS[g]


@dataclass(frozen=True)
class HeteroGaussDGP:
    """Gaussian noise with scale 0.3 + 0.45*(x0 + 2), so sigma in [0.3, 2.1]."""

    name: str = "hetero-gauss"
    noise_base: float = 0.3
    noise_slope: float = 0.45

    def sigma(self, x0):
        return self.noise_base + self.noise_slope * (np.asarray(x0) + 2.0)

    def cond_mean(self, x0, g):
        return _mean_fn(np.asarray(x0), np.asarray(g, dtype=int))

    def cond_quantile(self, x0, g, p: float):
        return self.cond_mean(x0, g) + self.sigma(x0) * stats.norm.ppf(p)

    def mu(self, x0, g):
        return self.cond_mean(x0, g)

    def score_quantile(self, x0, g, p: float):
        # S = sigma * |N(0,1)| given mu = conditional mean
        return self.sigma(x0) * stats.norm.ppf((1.0 + p) / 2.0)

    def sample_noise(self, rng: np.random.Generator, x0):
        return self.sigma(x0) * rng.standard_normal(np.asarray(x0).shape[0])

    def noise_mean(self, x0):
        return np.zeros_like(np.asarray(x0, dtype=np.float64))

    def noise_std(self, x0):
        return self.sigma(x0)


@dataclass(frozen=True)
class SkewGammaDGP:
    """Centered gamma noise: Gamma(k, theta(x)) - k*theta(x), right-skewed."""

    name: str = "skew-gamma"
    shape: float = 2.0
    scale_base: float = 0.25
    scale_slope: float = 0.125

    def theta(self, x0):
        return self.scale_base + self.scale_slope * (np.asarray(x0) + 2.0)

    def cond_mean(self, x0, g):
        return _mean_fn(np.asarray(x0), np.asarray(g, dtype=int))

    def cond_quantile(self, x0, g, p: float):
        th = self.theta(x0)
        return self.cond_mean(x0, g) + th * (stats.gamma.ppf(p, self.shape) - self.shape)

    def cond_median(self, x0, g):
        return self.cond_quantile(x0, g, 0.5)

    def mu(self, x0, g):
        # centering predictor: the conditional median (miscalibrated for the mean)
        return self.cond_median(x0, g)

    def score_quantile(self, x0, g, p: float):
        # S = |noise - median_noise| in units of theta; invert the folded cdf once
        med = stats.gamma.ppf(0.5, self.shape)

        def cdf(t):
            return stats.gamma.cdf(med + t, self.shape) - stats.gamma.cdf(med - t, self.shape)

        hi = stats.gamma.ppf(1.0 - 1e-12, self.shape)
        t_unit = optimize.brentq(lambda t: cdf(t) - p, 0.0, hi, xtol=1e-13)
        return self.theta(x0) * t_unit

    def sample_noise(self, rng: np.random.Generator, x0):
        th = self.theta(x0)
        return rng.gamma(self.shape, 1.0, size=np.asarray(x0).shape[0]) * th - self.shape * th

    def noise_mean(self, x0):
        return np.zeros_like(np.asarray(x0, dtype=np.float64))

    def noise_std(self, x0):
        return np.sqrt(self.shape) * self.theta(x0)


SyntheticDGP = HeteroGaussDGP | SkewGammaDGP

_DGPS = {"hetero-gauss": HeteroGaussDGP, "skew-gamma": SkewGammaDGP}


def make_dgp(name: str, **params) -> SyntheticDGP:
    try:
        cls = _DGPS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown DGP {name!r}; choose from {sorted(_DGPS)}"
        ) from None
    return cls(**params)


def gen_synthetic(
    dgp: SyntheticDGP, n: int, seed: int, alpha: float = 0.1
) -> tuple[Dataset, SyntheticDGP]:
    """Draw n rows from the DGP; deterministic under the seed.

    Returns the dataset together with the DGP itself, which doubles as the
    oracle (conditional means / quantiles / score quantiles are exact).
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2.0, 2.0, size=n)
    g = rng.choice(3, size=n, p=_GROUP_PROBS)
    m = dgp.cond_mean(x0, g)
    y = m + dgp.sample_noise(rng, x0)
    mu = dgp.mu(x0, g)
    score_q = dgp.score_quantile(x0, g, 1.0 - alpha)
    score_q = np.broadcast_to(score_q, (n,)).astype(np.float64)
    ds = Dataset(
        features=np.column_stack([x0, g.astype(np.float64)]),
        y=y,
        pred_columns={
            "f": 0.8 * m + 0.1,
            "mu": mu,
            "score_q": score_q,
            "score_q_miscal": 0.8 * score_q + 0.1,
        },
        feature_kinds=(Continuous(), Categorical(3)),
    )
    return ds, dgp
