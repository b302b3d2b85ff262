"""Pool-adjacent-violators kernels for generalized isotonic regression.

The stack algorithm is loss-agnostic: adjacent blocks merge whenever the
left pooled value is >= the right pooled value (exact comparison), and a
merged block takes the pooled minimizer of its member samples.  Two
specialized kernels cover the supported losses:

* squared error - blocks carry running (sum w, sum w*z), merges are O(1);
* pinball       - blocks keep their member values sorted, merges splice two
  sorted runs and re-read the weighted left quantile.

Inputs must be ordered by (prediction, value) with tie groups contiguous,
so every initial block (one per distinct prediction) is already
value-sorted; `sorted_layout` produces that ordering.  Kernels are compiled
with numba when available and fall back to pure Python otherwise.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

import numpy as np

try:  # pragma: no cover - environment probe
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _pava_mean(gsw, gswz, out_gstart, out_val):
    """PAVA over pre-pooled groups carrying (sum w, sum w*z); returns #blocks."""
    G = gsw.shape[0]
    sw = np.empty(G, dtype=np.float64)
    swz = np.empty(G, dtype=np.float64)
    top = -1
    for g in range(G):
        top += 1
        sw[top] = gsw[g]
        swz[top] = gswz[g]
        out_gstart[top] = g
        out_val[top] = swz[top] / sw[top]
        while top > 0 and out_val[top - 1] >= out_val[top]:
            swz[top - 1] += swz[top]
            sw[top - 1] += sw[top]
            out_val[top - 1] = swz[top - 1] / sw[top - 1]
            top -= 1
    return top + 1


@njit(cache=True)
def _left_quantile_sorted(v, w, s, e, target):
    """First value in the sorted slice [s, e) whose cumulative weight >= target."""
    acc = 0.0
    for i in range(s, e):
        acc += w[i]
        if acc >= target:
            return v[i]
    return v[e - 1]


@njit(cache=True)
def _pava_quantile(
    offsets, vals, wts, tau, unit_w, k_table, v, w, sv, sw, bstart, bw, out_gstart, out_val
):
    """PAVA with weighted left-quantile pooling; returns #blocks.

    `offsets` delimits tie groups in the (pred, value)-sorted arrays
    `vals`/`wts`.  When `unit_w` all weights are equal and the quantile of a
    block of c samples is read at the exact precomputed rank ``k_table[c]``;
    otherwise cumulative weights are accumulated against ``tau * weight``.
    """
    G = offsets.shape[0] - 1
    n = vals.shape[0]
    for i in range(n):
        v[i] = vals[i]
        w[i] = wts[i]
    top = -1
    end = 0
    for g in range(G):
        s = offsets[g]
        e = offsets[g + 1]
        top += 1
        bstart[top] = s
        out_gstart[top] = g
        tw = 0.0
        if unit_w:
            tw = w[0] * (e - s)
        else:
            for i in range(s, e):
                tw += w[i]
        bw[top] = tw
        if unit_w:
            out_val[top] = v[s + k_table[e - s] - 1]
        else:
            out_val[top] = _left_quantile_sorted(v, w, s, e, tau * tw)
        end = e
        while top > 0 and out_val[top - 1] >= out_val[top]:
            a0 = bstart[top - 1]
            a1 = bstart[top]
            if end - a1 <= 4:
                # common case: a few right-side samples insert into the big
                # sorted left block in place (no scratch, single shift each)
                for j in range(a1, end):
                    x = v[j]
                    xw = w[j]
                    lo2 = a0
                    hi2 = j
                    while lo2 < hi2:
                        mid = (lo2 + hi2) >> 1
                        if v[mid] <= x:
                            lo2 = mid + 1
                        else:
                            hi2 = mid
                    for t in range(j, lo2, -1):
                        v[t] = v[t - 1]
                        w[t] = w[t - 1]
                    v[lo2] = x
                    w[lo2] = xw
            else:
                i = a0
                j = a1
                k2 = 0
                while i < a1 and j < end:
                    if v[i] <= v[j]:
                        sv[k2] = v[i]
                        sw[k2] = w[i]
                        i += 1
                    else:
                        sv[k2] = v[j]
                        sw[k2] = w[j]
                        j += 1
                    k2 += 1
                while i < a1:
                    sv[k2] = v[i]
                    sw[k2] = w[i]
                    i += 1
                    k2 += 1
                while j < end:
                    sv[k2] = v[j]
                    sw[k2] = w[j]
                    j += 1
                    k2 += 1
                for t in range(k2):
                    v[a0 + t] = sv[t]
                    w[a0 + t] = sw[t]
            bw[top - 1] += bw[top]
            top -= 1
            if unit_w:
                out_val[top] = v[a0 + k_table[end - a0] - 1]
            else:
                out_val[top] = _left_quantile_sorted(v, w, a0, end, tau * bw[top])
    return top + 1


class QuantileWorkspace:
    """Reusable scratch buffers for repeated `_pava_quantile` calls of size n."""

    def __init__(self, n: int, n_groups: int):
        self.v = np.empty(n, dtype=np.float64)
        self.w = np.empty(n, dtype=np.float64)
        self.sv = np.empty(n, dtype=np.float64)
        self.sw = np.empty(n, dtype=np.float64)
        self.bstart = np.empty(n_groups, dtype=np.int64)
        self.bw = np.empty(n_groups, dtype=np.float64)
        self.gstart = np.empty(n_groups, dtype=np.int64)
        self.val = np.empty(n_groups, dtype=np.float64)


def sorted_layout(preds: np.ndarray, z: np.ndarray, w: np.ndarray):
    """Sort samples by (pred, value) and delimit tie groups.

    Returns (unique_preds, group_offsets, z_sorted, w_sorted, order) where
    group g occupies ``z_sorted[offsets[g]:offsets[g+1]]``, value-sorted.
    """
    order = np.lexsort((z, preds))
    ps = preds[order]
    uniq, counts = np.unique(ps, return_counts=True)
    offsets = np.empty(uniq.shape[0] + 1, dtype=np.int64)
    offsets[0] = 0
    np.cumsum(counts, out=offsets[1:])
    return uniq, offsets, z[order], w[order], order


def run_pava_mean(offsets: np.ndarray, z_sorted: np.ndarray, w_sorted: np.ndarray):
    """Squared-error PAVA on a sorted layout; returns (block_first_group, block_values)."""
    G = offsets.shape[0] - 1
    gsw = np.add.reduceat(w_sorted, offsets[:-1])
    gswz = np.add.reduceat(w_sorted * z_sorted, offsets[:-1])
    gstart = np.empty(G, dtype=np.int64)
    val = np.empty(G, dtype=np.float64)
    nb = _pava_mean(gsw, gswz, gstart, val)
    return gstart[:nb].copy(), val[:nb].copy()


@lru_cache(maxsize=128)
def _rank_table_cached(alpha: float, n_max: int) -> np.ndarray:
    """Exact left-quantile ranks k(c) = c - floor(alpha * c) for c in [0, n_max]."""
    frac_alpha = Fraction(alpha)
    table = np.empty(n_max + 1, dtype=np.int64)
    table[0] = 0
    for c in range(1, n_max + 1):
        k = c - math.floor(frac_alpha * c)
        table[c] = min(max(k, 1), c)
    table.setflags(write=False)
    return table


def rank_table(alpha: float, n_max: int) -> np.ndarray:
    return _rank_table_cached(float(alpha), int(n_max))


def run_pava_quantile(
    offsets: np.ndarray,
    z_sorted: np.ndarray,
    w_sorted: np.ndarray,
    alpha: float,
    workspace: QuantileWorkspace | None = None,
    k_table: np.ndarray | None = None,
):
    """Pinball PAVA at miscoverage alpha; returns (block_first_group, block_values).

    Equal-weight inputs use exact rank selection; heterogeneous weights fall
    back to cumulative-weight accumulation against (1 - alpha) * weight.
    """
    G = offsets.shape[0] - 1
    n = z_sorted.shape[0]
    ws = workspace if workspace is not None else QuantileWorkspace(n, G)
    unit_w = bool(np.all(w_sorted == w_sorted[0])) if n else True
    if k_table is None:
        k_table = rank_table(alpha, n) if unit_w else _EMPTY_RANKS
    nb = _pava_quantile(
        offsets,
        z_sorted,
        w_sorted,
        1.0 - alpha,
        unit_w,
        k_table,
        ws.v,
        ws.w,
        ws.sv,
        ws.sw,
        ws.bstart,
        ws.bw,
        ws.gstart,
        ws.val,
    )
    return ws.gstart[:nb].copy(), ws.val[:nb].copy()


_EMPTY_RANKS = np.zeros(1, dtype=np.int64)
