import numpy as np
import pytest

from venncal import (
    BinningConfig,
    ConformalSet,
    DesignMatrix,
    DomainError,
    Histogram,
    InvalidInputError,
    Isotonic,
    marginal_baseline,
    mondrian_baseline,
    multical_cp_interval,
    venn_cp_interval,
)
from venncal.conformal import GroupingSpec, conformal_quantile, prediction_bin_groups, symmetric_y_grid


class TestConformalSet:
    def test_from_grid_runs(self):
        grid = np.arange(0.0, 10.0)
        accepted = np.array([0, 1, 1, 0, 0, 1, 1, 1, 0, 0], dtype=bool)
        cs = ConformalSet.from_grid(0.1, grid, accepted)
        assert cs.intervals == ((1.0, 2.0), (5.0, 7.0))
        assert cs.hull == (1.0, 7.0)
        assert cs.contains(6.0) and not cs.contains(3.0)
        assert cs.width == 6.0

    def test_empty(self):
        cs = ConformalSet.from_grid(0.1, np.arange(3.0), np.zeros(3, dtype=bool))
        assert cs.is_empty and cs.hull is None and cs.width == 0.0

    def test_intervals_validated(self):
        with pytest.raises(InvalidInputError):
            ConformalSet(alpha=0.1, intervals=((0.0, 2.0), (1.0, 3.0)))

    def test_json(self):
        cs = ConformalSet(alpha=0.2, intervals=((0.0, 1.0),), tie_events=(0.5,))
        d = cs.to_json_dict()
        assert d["hull"] == [0.0, 1.0]
        assert d["tie_events"] == [0.5]


class TestMarginalBaseline:
    def test_order_statistic_example(self):
        cs = marginal_baseline(np.arange(1.0, 10.0), 0.1, x_mu=0.0)
        assert cs.hull == (-9.0, 9.0)

    def test_brute_force_coverage_count(self, rng):
        # smallest q among scores with #{s_i <= q} >= ceil(0.9 * 10)
        scores = np.arange(1.0, 10.0)
        q = conformal_quantile(scores, 0.1)
        k = int(np.ceil(0.9 * 10))
        assert int(np.sum(scores <= q)) >= k
        assert all(int(np.sum(scores <= c)) < k for c in scores[scores < q])

    def test_median_example(self):
        cs = marginal_baseline(np.array([1.0, 2.0, 3.0]), 0.5, x_mu=1.0)
        assert cs.hull == (-1.0, 3.0)  # q = 2nd order statistic = 2

    def test_small_sample_guard(self):
        cs = marginal_baseline(np.array([1.0]), 0.1, x_mu=0.0)
        assert cs.hull == (-np.inf, np.inf)
        assert cs.width == np.inf
        assert cs.contains(123.0)


class TestMondrianBaseline:
    def test_single_group_reduces_to_marginal(self, rng):
        scores = rng.exponential(size=20)
        gids = np.zeros(20, dtype=int)
        a = mondrian_baseline(scores, gids, 0.2, 0, x_mu=1.0)
        b = marginal_baseline(scores, 0.2, x_mu=1.0)
        assert a.hull == b.hull

    def test_disjoint_ranges_give_group_thresholds(self):
        scores = np.concatenate([np.arange(1.0, 10.0), np.arange(101.0, 110.0)])
        gids = np.repeat([0, 1], 9)
        lo_g = mondrian_baseline(scores, gids, 0.1, 0, x_mu=0.0)
        hi_g = mondrian_baseline(scores, gids, 0.1, 1, x_mu=0.0)
        assert lo_g.hull == (-9.0, 9.0)
        assert hi_g.hull == (-109.0, 109.0)

    def test_single_member_group_guard(self):
        scores = np.array([1.0, 2.0])
        gids = np.array([0, 1])
        cs = mondrian_baseline(scores, gids, 0.1, 1, x_mu=0.0)
        assert cs.width == np.inf

    def test_empty_group_error_names_group(self):
        with pytest.raises(DomainError, match="7"):
            mondrian_baseline(np.array([1.0]), np.array([0]), 0.1, 7, 0.0)

    def test_grouping_spec_validation(self):
        with pytest.raises(InvalidInputError):
            GroupingSpec(kind="nope")
        GroupingSpec(kind="prediction_bins", num_bins=5)


class TestVennCpInterval:
    def test_single_bin_reduction_to_marginal(self):
        # n=9 scores {1..9}, alpha=0.1: accepted set {y : |y - mu| <= 9}
        scores = np.arange(1.0, 10.0)
        qpreds = np.zeros(9)
        mu = 2.0
        y_grid = np.linspace(mu - 15.0, mu + 15.0, 1201)
        cs = venn_cp_interval(qpreds, scores, Histogram(BinningConfig(1)), 0.1,
                              x_quantile_pred=0.0, x_mu=mu, y_grid=y_grid)
        lo, hi = cs.hull
        assert lo == pytest.approx(mu - 9.0, abs=0.03)
        assert hi == pytest.approx(mu + 9.0, abs=0.03)
        inside = np.abs(y_grid - mu) <= 9.0
        got = np.array([cs.contains(float(v)) for v in y_grid])
        assert np.array_equal(got[inside], np.ones(inside.sum(), dtype=bool))

    def test_tiny_quantile_gives_narrow_set(self):
        # alpha=0.99, n=9: the threshold is the smallest augmented score, so
        # the set collapses to {y : |y - mu| <= min score} around mu
        scores = np.arange(1.0, 10.0)
        qpreds = np.zeros(9)
        y_grid = np.linspace(-10.0, 10.0, 801)
        cs = venn_cp_interval(qpreds, scores, Histogram(BinningConfig(1)), 0.99,
                              0.0, 0.0, y_grid)
        lo, hi = cs.hull
        assert lo == pytest.approx(-1.0, abs=0.03)
        assert hi == pytest.approx(1.0, abs=0.03)
        # with a tiny smallest score the set is a single grid cell
        tiny = np.concatenate([[0.01], np.arange(2.0, 10.0)])
        cs2 = venn_cp_interval(qpreds, tiny, Histogram(BinningConfig(1)), 0.99,
                               0.0, 0.0, y_grid)
        assert cs2.width <= 2 * (y_grid[1] - y_grid[0])

    @pytest.mark.parametrize("algo", [Histogram(BinningConfig(1)), Isotonic()])
    def test_constant_scores_hull(self, algo):
        scores = np.full(20, 3.0)
        qpreds = np.linspace(0, 1, 20)
        y_grid = np.linspace(-5.0, 5.0, 4001)
        cs = venn_cp_interval(qpreds, scores, algo, 0.1, 0.5, 0.0, y_grid)
        lo, hi = cs.hull
        assert lo == pytest.approx(-3.0, abs=0.01)
        assert hi == pytest.approx(3.0, abs=0.01)
        assert len(cs.tie_events) > 0  # s(x,y) == threshold on the boundary cells

    def test_marginal_equivalence_exact_on_random_instances(self, rng):
        # K=1 Venn CP accepts y iff |y-mu| <= marginal conformal quantile
        for _ in range(25):
            n = int(rng.integers(3, 40))
            alpha = float(rng.uniform(0.05, 0.5))
            scores = rng.exponential(size=n)
            qpreds = rng.normal(size=n)
            mu = float(rng.normal())
            q = conformal_quantile(scores, alpha)
            probe = np.concatenate(
                [mu + rng.uniform(-2, 2, size=12) * max(1.0, np.median(scores))],
            )
            if np.isfinite(q):
                probe = np.concatenate([probe, [mu + q, mu - q, mu + q + 1e-9]])
            cs = venn_cp_interval(qpreds, scores, Histogram(BinningConfig(1)), alpha,
                                  0.0, mu, np.unique(probe))
            for y in np.unique(probe):
                assert cs.contains(float(y)) == (abs(y - mu) <= q)

    def test_nesting_in_alpha(self, rng):
        scores = rng.exponential(size=30)
        qpreds = rng.normal(size=30)
        y_grid = np.linspace(-8, 8, 161)
        for algo in (Histogram(BinningConfig(1)), Isotonic()):
            small = venn_cp_interval(qpreds, scores, algo, 0.05, 0.2, 0.0, y_grid)
            large = venn_cp_interval(qpreds, scores, algo, 0.3, 0.2, 0.0, y_grid)
            assert set(large.grid_members.tolist()) <= set(small.grid_members.tolist())

    def test_grid_refinement_stability(self, rng):
        scores = rng.exponential(size=40)
        qpreds = rng.normal(size=40)
        coarse = np.linspace(-8, 8, 101)
        fine = np.linspace(-8, 8, 201)
        cell = coarse[1] - coarse[0]
        a = venn_cp_interval(qpreds, scores, Isotonic(), 0.1, 0.1, 0.0, coarse)
        b = venn_cp_interval(qpreds, scores, Isotonic(), 0.1, 0.1, 0.0, fine)
        if a.hull and b.hull:
            assert abs(a.hull[0] - b.hull[0]) <= cell + 1e-12
            assert abs(a.hull[1] - b.hull[1]) <= cell + 1e-12


class TestMulticalCpInterval:
    def test_intercept_only_equals_marginal(self, rng):
        for _ in range(10):
            n = int(rng.integers(5, 30))
            scores = rng.exponential(size=n)
            mu = float(rng.normal())
            dm = DesignMatrix(values=np.ones((n, 1)), column_names=("intercept",))
            q = conformal_quantile(scores, 0.1)
            y_grid = np.unique(
                np.concatenate([np.linspace(mu - 3 * max(1, q if np.isfinite(q) else 1),
                                            mu + 3 * max(1, q if np.isfinite(q) else 1), 41),
                                [mu + q, mu - q] if np.isfinite(q) else [mu]])
            )
            cs = multical_cp_interval(dm, np.ones(1), scores, 0.1, mu, y_grid)
            ref = marginal_baseline(scores, 0.1, mu)
            for y in y_grid:
                assert cs.contains(float(y)) == ref.contains(float(y))

    def test_group_indicators_equal_mondrian(self, rng):
        n = 40
        groups = rng.integers(0, 2, size=n)
        scores = rng.exponential(size=n) * (1 + 3 * groups)
        phi = np.column_stack([(groups == 0).astype(float), (groups == 1).astype(float)])
        dm = DesignMatrix(values=phi, column_names=("g0", "g1"))
        mu = 0.0
        y_grid = np.linspace(-20, 20, 201)
        for g in (0, 1):
            x_row = np.array([1.0, 0.0]) if g == 0 else np.array([0.0, 1.0])
            cs = multical_cp_interval(dm, x_row, scores, 0.1, mu, y_grid)
            ref = mondrian_baseline(scores, groups, 0.1, g, mu)
            for y in y_grid:
                assert cs.contains(float(y)) == ref.contains(float(y))

    def test_permutation_stability(self, rng):
        n = 20
        scores = rng.exponential(size=n)
        x_feat = rng.normal(size=n)
        phi = np.column_stack([np.ones(n), x_feat])
        dm = DesignMatrix(values=phi, column_names=("a", "b"))
        y_grid = np.linspace(-6, 6, 61)
        cs1 = multical_cp_interval(dm, np.array([1.0, 0.3]), scores, 0.1, 0.0, y_grid)
        perm = rng.permutation(n)
        dm2 = DesignMatrix(values=phi[perm], column_names=("a", "b"))
        cs2 = multical_cp_interval(dm2, np.array([1.0, 0.3]), scores[perm], 0.1, 0.0, y_grid)
        assert cs1.intervals == cs2.intervals


def test_prediction_bin_groups(rng):
    preds = rng.normal(size=100)
    edges, assign = prediction_bin_groups(preds, 5)
    gids = assign(preds)
    assert gids.min() == 0 and gids.max() == 4
    counts = np.bincount(gids)
    assert np.all(counts >= 1)


def test_symmetric_y_grid():
    g = symmetric_y_grid(2.0, 3.0, num=10)
    assert g.min() == -1.0 and g.max() == 5.0
    assert np.all(np.diff(g) > 0)


class TestMulticalibratedCoverage:
    """Monte Carlo first-order coverage conditions per basis column.

    The oracle-augmented offset quantile fit is evaluated at the held-out
    point; the mean of b_j(X) * ((1 - alpha) - 1{covered}) must vanish for
    every column of the class.
    """

    @staticmethod
    def _simulate(kind, R, n, seed):
        from venncal import fit_offset_quantile

        children = np.random.SeedSequence(seed).spawn(R)
        m = 3 if kind == "partition" else 2
        prods = np.empty((R, m))
        for r in range(R):
            gen = np.random.default_rng(children[r])
            x = gen.uniform(-2, 2, size=n + 1)
            g = gen.integers(0, 3, size=n + 1)
            sigma = 0.3 + 0.45 * (x + 2)
            s = sigma * np.abs(gen.standard_normal(n + 1))
            if kind == "partition":
                phi = np.column_stack([(g == 0), (g == 1), (g == 2)]).astype(float)
            else:
                phi = np.column_stack([np.ones(n + 1), x])
            dm = DesignMatrix(values=phi, column_names=tuple(f"c{j}" for j in range(m)))
            fit = fit_offset_quantile(s, dm, 0.1)
            covered = s[n] <= float(phi[n] @ fit.beta)
            prods[r] = phi[n] * (0.9 - covered)
        return prods

    def test_group_indicator_class(self):
        prods = self._simulate("partition", R=2000, n=600, seed=5150)
        for j in range(prods.shape[1]):
            m = prods[:, j].mean()
            se = prods[:, j].std(ddof=1) / np.sqrt(prods.shape[0])
            assert abs(m) <= 3 * se, (j, m, 3 * se)

    def test_linear_class_with_irls_solver(self):
        prods = self._simulate("general", R=500, n=200, seed=60)
        for j in range(prods.shape[1]):
            m = prods[:, j].mean()
            se = prods[:, j].std(ddof=1) / np.sqrt(prods.shape[0])
            assert abs(m) <= 3 * se, (j, m, 3 * se)
