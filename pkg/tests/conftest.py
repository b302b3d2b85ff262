"""Shared test oracles: brute-force fits kept independent of the library paths."""

from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest

from venncal import Pinball, SquaredError, loss_value, pool_minimizer


def pinball_objective(loss, c, z, w=None):
    z = np.asarray(z, dtype=np.float64)
    w = np.ones_like(z) if w is None else np.asarray(w, dtype=np.float64)
    return float(np.sum(w * loss_value(loss, np.full_like(z, c), z)))


def grid_minimize_pool(loss, z, w=None, resolution=4001):
    """Dense-grid argmin of the pooled objective; returns (argmin, min value).

    The grid contains every sample value plus near-offsets so kinks are hit.
    """
    z = np.asarray(z, dtype=np.float64)
    lo, hi = z.min() - 1.0, z.max() + 1.0
    grid = np.unique(
        np.concatenate([z, z - 1e-9, z + 1e-9, np.linspace(lo, hi, resolution)])
    )
    objs = np.array([pinball_objective(loss, c, z, w) for c in grid])
    j = int(np.argmin(objs))
    return float(grid[j]), float(objs[j])


def brute_force_isotonic(loss, preds, z, w=None):
    """Exact isotonic optimum by search over contiguous block compositions.

    Equal predictions are pooled into one group; every composition whose
    pooled block values are nondecreasing is a feasible candidate, and the
    optimum is the best of them.  Returns (objective, fitted values).
    """
    preds = np.asarray(preds, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.ones_like(z) if w is None else np.asarray(w, dtype=np.float64)
    order = np.argsort(preds, kind="stable")
    p, zz, ww = preds[order], z[order], w[order]
    _, ginv = np.unique(p, return_inverse=True)
    n_groups = int(ginv.max()) + 1
    best_obj, best_fit = np.inf, None
    cut_positions = list(range(1, n_groups))
    for r in range(n_groups):
        for cuts in combinations(cut_positions, r):
            bounds = [0, *cuts, n_groups]
            vals = []
            ok = True
            obj = 0.0
            fitted_sorted = np.empty_like(zz)
            for a, b in zip(bounds[:-1], bounds[1:]):
                mask = (ginv >= a) & (ginv < b)
                c = pool_minimizer(loss, zz[mask], ww[mask])
                if vals and c < vals[-1]:
                    ok = False
                    break
                vals.append(c)
                obj += pinball_objective(loss, c, zz[mask], ww[mask])
                fitted_sorted[mask] = c
            if ok and obj < best_obj - 1e-15:
                best_obj = obj
                fit = np.empty_like(fitted_sorted)
                fit[order] = fitted_sorted
                best_fit = fit
    return best_obj, best_fit


def reference_isotonic_fit(loss, preds, z, w=None):
    """Plain-Python stack PAVA over index blocks (kernel-independent path)."""
    preds = np.asarray(preds, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.ones_like(z) if w is None else np.asarray(w, dtype=np.float64)
    order = np.argsort(preds, kind="stable")
    p = preds[order]
    uniq = np.unique(p)
    groups = [np.flatnonzero(p == u) for u in uniq]
    blocks = []  # (member_sorted_indices-into-order, value, first_group)
    for gi, g in enumerate(groups):
        members = list(order[g])
        value = pool_minimizer(loss, z[members], w[members])
        blocks.append([members, value, gi])
        while len(blocks) > 1 and blocks[-2][1] >= blocks[-1][1]:
            m2 = blocks[-2][0] + blocks[-1][0]
            v2 = pool_minimizer(loss, z[m2], w[m2])
            g2 = blocks[-2][2]
            blocks = blocks[:-2]
            blocks.append([m2, v2, g2])
    fitted = np.empty_like(z)
    for members, value, _ in blocks:
        fitted[members] = value
    return fitted, blocks


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_loss(rng):
    if rng.uniform() < 0.5:
        return SquaredError()
    return Pinball(float(rng.uniform(0.05, 0.95)))
