import numpy as np
import pytest

from venncal import (
    BasisSpec,
    BinningConfig,
    Categorical,
    Continuous,
    Dataset,
    DesignMatrix,
    FitError,
    Histogram,
    ImputationGrid,
    Pinball,
    SolverError,
    SquaredError,
    build_basis,
    fit_offset_ls,
    fit_offset_quantile,
    multicalibration_error,
    sm_augment,
    venn_calibrate,
    venn_multical,
)
from venncal.core import CalibrationWarning, pool_minimizer
from venncal.multical import QuantileSolverConfig, quantile_subgradient_gap

from conftest import pinball_objective


def _design(rng, n, m, intercept=True):
    cols = [np.ones(n)] if intercept else [rng.normal(size=n)]
    cols += [rng.normal(size=n) for _ in range(m - 1)]
    phi = np.column_stack(cols)
    return DesignMatrix(values=phi, column_names=tuple(f"c{j}" for j in range(m)))


class TestBuildBasis:
    def test_polynomial_base_no_knots(self):
        ds = Dataset(features=np.linspace(0, 1, 7)[:, None], y=np.zeros(7))
        dm = build_basis(ds, BasisSpec(intercept=True, num_knots=0))
        assert dm.column_names == ("intercept", "x0", "x0^2", "x0^3")
        x = ds.features[:, 0]
        assert np.array_equal(dm.values[:, 1], x)
        assert np.array_equal(dm.values[:, 3], x**3)

    def test_categorical_drop_first(self):
        ds = Dataset(
            features=np.array([[0.0], [1.0], [2.0], [1.0]]),
            y=np.zeros(4),
            feature_kinds=(Categorical(3),),
        )
        dm = build_basis(ds, BasisSpec(intercept=True))
        assert dm.m == 3  # intercept + 2 indicator columns
        assert dm.column_names == ("intercept", "x0_lvl1", "x0_lvl2")
        assert dm.values[:, 1].tolist() == [0.0, 1.0, 0.0, 1.0]

    def test_truncated_power_at_zero_knot(self):
        ds = Dataset(features=np.array([[-1.0], [2.0], [0.0], [1.0]]), y=np.zeros(4))
        dm = build_basis(ds, BasisSpec(intercept=False, num_knots=1, per_feature_knots={}))
        # knot is the median ~0.5; rebuild with explicit zero knot via expansion
        basis = dm.basis
        x = np.array([[-1.0], [2.0]])
        tp = np.maximum(x[:, 0] - 0.0, 0.0) ** 3
        assert tp.tolist() == [0.0, 8.0]

    def test_default_five_knots(self, rng):
        ds = Dataset(features=rng.normal(size=(200, 1)), y=np.zeros(200))
        dm = build_basis(ds, BasisSpec())
        assert dm.column_names[:4] == ("intercept", "x0", "x0^2", "x0^3")
        assert sum(1 for c in dm.column_names if c.startswith("x0_tp")) == 5
        ks = dm.basis.knots[0]
        assert all(a < b for a, b in zip(ks, ks[1:]))

    def test_constant_feature_warns_and_skips(self):
        ds = Dataset(
            features=np.column_stack([np.zeros(5), np.arange(5.0)]), y=np.zeros(5)
        )
        with pytest.warns(CalibrationWarning):
            dm = build_basis(ds, BasisSpec(num_knots=0))
        assert all(not c.startswith("x0") or c == "x0" for c in dm.column_names[:1])
        assert dm.column_names == ("intercept", "x1", "x1^2", "x1^3")

    def test_knot_clamping_warns(self):
        ds = Dataset(features=np.array([[0.0], [1.0], [1.0], [0.0], [1.0]]), y=np.zeros(5))
        with pytest.warns(CalibrationWarning):
            dm = build_basis(ds, BasisSpec(num_knots=5))
        assert dm.m < 4 + 5

    def test_expansion_on_new_rows_uses_frozen_knots(self, rng):
        ds = Dataset(features=rng.normal(size=(50, 1)), y=np.zeros(50))
        dm = build_basis(ds, BasisSpec(num_knots=3))
        row = dm.basis.expand(np.array([[0.2]]))
        assert row.shape == (1, dm.m)


class TestOffsetLeastSquares:
    def test_intercept_only_mean(self, rng):
        dm = _design(rng, 3, 1)
        fit = fit_offset_ls(np.array([1.0, 2.0, 3.0]), dm)
        assert fit.beta[0] == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_residuals_zero_beta(self, rng):
        phi = np.column_stack([np.ones(4), np.array([1.0, -1.0, 1.0, -1.0])])
        dm = DesignMatrix(values=phi, column_names=("a", "b"))
        r = np.array([1.0, 1.0, -1.0, -1.0])  # orthogonal to both columns
        fit = fit_offset_ls(r, dm)
        assert np.max(np.abs(fit.beta)) <= 1e-12

    def test_matches_dense_solve(self, rng):
        for _ in range(30):
            dm = _design(rng, 6, 3)
            r = rng.normal(size=6)
            fit = fit_offset_ls(r, dm)
            expect = np.linalg.lstsq(dm.values, r, rcond=None)[0]
            np.testing.assert_allclose(fit.beta, expect, atol=1e-10)
            assert fit.optimality_gap <= 1e-8

    def test_singular_gram_instructs_ridge(self):
        phi = np.column_stack([np.ones(4), np.ones(4)])
        dm = DesignMatrix(values=phi, column_names=("a", "b"))
        with pytest.raises(FitError, match="ridge"):
            fit_offset_ls(np.arange(4.0), dm, ridge=0.0)

    def test_gram_inverse_cache_residual_checked(self, rng):
        dm = _design(rng, 20, 4).with_gram_inverse(ridge=1e-10)
        eye = dm.gram + 1e-10 * np.eye(4)
        assert np.max(np.abs(eye @ dm.gram_inverse - np.eye(4))) <= 1e-6


class TestShermanMorrison:
    def test_zero_residual_point_is_fixed_point(self, rng):
        dm = _design(rng, 10, 3).with_gram_inverse(0.0)
        r = rng.normal(size=10)
        fit = fit_offset_ls(r, dm)
        row = rng.normal(size=3)
        fit2 = sm_augment(fit, dm, row, float(row @ fit.beta))
        np.testing.assert_allclose(fit2.beta, fit.beta, atol=1e-10)

    def test_matches_full_refit(self, rng):
        for _ in range(200):
            n = int(rng.integers(4, 50))
            m = int(rng.integers(1, min(10, n)))
            dm = _design(rng, n, m).with_gram_inverse(0.0)
            r = rng.normal(size=n)
            fit = fit_offset_ls(r, dm)
            row = rng.normal(size=m)
            r_new = float(rng.normal())
            fit2 = sm_augment(fit, dm, row, r_new)
            full = np.linalg.lstsq(np.vstack([dm.values, row]), np.append(r, r_new), rcond=None)[0]
            np.testing.assert_allclose(fit2.beta, full, atol=1e-8)

    def test_augmented_prediction_fixed_point(self, rng):
        dm = _design(rng, 12, 3).with_gram_inverse(0.0)
        r = rng.normal(size=12)
        fit = fit_offset_ls(r, dm)
        row = rng.normal(size=3)
        imputed = float(row @ fit.beta)
        fit2 = sm_augment(fit, dm, row, imputed)
        assert float(row @ fit2.beta) == pytest.approx(imputed, abs=1e-10)

    def test_requires_cached_inverse(self, rng):
        dm = _design(rng, 5, 2)
        fit = fit_offset_ls(np.ones(5), dm)
        with pytest.raises(FitError, match="gram inverse"):
            sm_augment(fit, dm, np.ones(2), 0.0)


class TestOffsetQuantile:
    def test_intercept_only_median(self, rng):
        dm = DesignMatrix(values=np.ones((3, 1)), column_names=("intercept",))
        fit = fit_offset_quantile(np.array([1.0, 2.0, 9.0]), dm, alpha=0.5)
        assert fit.beta[0] == 2.0

    def test_intercept_only_left_endpoint(self, rng):
        dm = DesignMatrix(values=np.ones((9, 1)), column_names=("intercept",))
        scores = np.arange(1.0, 10.0)
        fit = fit_offset_quantile(scores, dm, alpha=0.1)
        assert fit.beta[0] == 9.0  # left endpoint of the 0.9-quantile interval
        # grid search: nothing smaller attains the optimum
        best = pinball_objective(Pinball(0.1), 9.0, scores)
        for c in np.linspace(0.0, 8.999, 400):
            assert pinball_objective(Pinball(0.1), c, scores) > best - 1e-12

    def test_objective_no_worse_than_zero(self, rng):
        for _ in range(25):
            n = int(rng.integers(5, 60))
            m = int(rng.integers(1, 5))
            dm = _design(rng, n, m)
            r = rng.normal(size=n) * 2
            alpha = float(rng.uniform(0.05, 0.5))
            fit = fit_offset_quantile(r, dm, alpha)
            obj = pinball_objective(Pinball(alpha), 0.0, r - dm.values @ fit.beta)
            obj0 = pinball_objective(Pinball(alpha), 0.0, r)
            assert obj <= obj0 + 1e-9

    def test_partition_design_solves_per_group(self, rng):
        n = 30
        groups = rng.integers(0, 3, size=n)
        phi = np.zeros((n, 3))
        phi[np.arange(n), groups] = 1.0
        dm = DesignMatrix(values=phi, column_names=("g0", "g1", "g2"))
        r = rng.normal(size=n)
        fit = fit_offset_quantile(r, dm, alpha=0.2)
        for g in range(3):
            expect = pool_minimizer(Pinball(0.2), r[groups == g])
            assert fit.beta[g] == expect

    def test_random_instances_pass_verification(self, rng):
        for _ in range(60):
            n = int(rng.integers(8, 120))
            m = int(rng.integers(1, 7))
            dm = _design(rng, n, m)
            r = rng.normal(size=n) * 2 + dm.values @ rng.normal(size=m)
            alpha = float(rng.uniform(0.05, 0.5))
            fit = fit_offset_quantile(r, dm, alpha)
            assert fit.optimality_gap <= 1e-6 * n

    def test_gap_reported_on_failure(self):
        # zero tolerance and zero kink width force the SolverError branch:
        # a 6-column vertex solve never zeroes all active residuals exactly
        rng = np.random.default_rng(5)
        n, m = 200, 6
        phi = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(m - 1)])
        dm = DesignMatrix(values=phi, column_names=tuple("abcdef"))
        r = rng.standard_t(2, size=n) * 3
        with pytest.raises(SolverError) as err:
            fit_offset_quantile(
                r, dm, 0.3, QuantileSolverConfig(tolerance=0.0, kink_tol=0.0)
            )
        assert err.value.gap > 0.0


class TestVennMultical:
    @staticmethod
    def _dataset(rng, n=40):
        x = rng.normal(size=(n, 1))
        f = 0.8 * x[:, 0] + 0.1
        y = x[:, 0] + 0.3 * rng.normal(size=n)
        return Dataset(features=x, y=y, pred_columns={"f": f}, feature_kinds=(Continuous(),))

    def test_intercept_only_reduces_to_single_bin_venn(self, rng):
        # constant-class equivalence: with a constant base model the offset
        # intercept fit f + mean(y_aug - f) equals the single-bin pooled mean
        n = 40
        y = rng.normal(size=n)
        x_pred = 0.7
        f_const = np.full(n, x_pred)
        ds = Dataset(
            features=np.zeros((n, 1)), y=y, pred_columns={"f": f_const}
        )
        grid = ImputationGrid.equal_frequency(y, m=9)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CalibrationWarning)
            vs = venn_multical(
                SquaredError(), ds, "f", BasisSpec(intercept=True, num_knots=0),
                np.array([0.0]), x_pred, grid, ridge=0.0,
            )
        ref = venn_calibrate(
            Histogram(BinningConfig(1)), SquaredError(), f_const, y, x_pred, grid
        )
        np.testing.assert_allclose(vs.predictions, ref.predictions, atol=1e-10)

    def test_entries_match_full_refit(self, rng):
        ds = self._dataset(rng, n=50)
        grid = ImputationGrid.equal_frequency(ds.y, m=11)
        x_row = np.array([0.2])
        x_pred = 0.8 * 0.2 + 0.1
        spec = BasisSpec(intercept=True, num_knots=3)
        vs = venn_multical(SquaredError(), ds, "f", spec, x_row, x_pred, grid, ridge=0.0)
        design = build_basis(ds, spec)
        phi_x = design.basis.expand(x_row[None, :])[0]
        r = ds.y - ds.pred("f")
        for y_imp, got in vs.entries():
            phi_aug = np.vstack([design.values, phi_x])
            r_aug = np.append(r, y_imp - x_pred)
            beta = np.linalg.lstsq(phi_aug, r_aug, rcond=None)[0]
            assert got == pytest.approx(x_pred + phi_x @ beta, abs=1e-8)

    def test_oracle_fit_first_order_conditions(self, rng):
        # Venn multicalibration's oracle entry satisfies the augmented normal
        # equations for every basis column
        for _ in range(20):
            ds = self._dataset(rng, n=30)
            spec = BasisSpec(intercept=True, num_knots=2)
            x_row = np.array([float(rng.normal())])
            x_pred = float(rng.normal())
            y_true = float(rng.normal())
            vs = venn_multical(
                SquaredError(), ds, "f", spec, x_row, x_pred,
                ImputationGrid.explicit([y_true]), ridge=0.0,
            )
            fstar_x = vs.predictions[0]
            design = build_basis(ds, spec)
            phi_x = design.basis.expand(x_row[None, :])[0]
            phi_aug = np.vstack([design.values, phi_x])
            r_aug = np.append(ds.y - ds.pred("f"), y_true - x_pred)
            beta = np.linalg.lstsq(phi_aug, r_aug, rcond=None)[0]
            fitted = np.append(ds.pred("f"), x_pred) + phi_aug @ beta
            resid = np.append(ds.y, y_true) - fitted
            assert np.max(np.abs(phi_aug.T @ resid)) <= 1e-8
            assert fstar_x == pytest.approx(x_pred + phi_x @ beta, abs=1e-8)

    def test_extremes_mode_matches_full_endpoints(self, rng):
        ds = self._dataset(rng, n=60)
        grid = ImputationGrid.equal_frequency(ds.y, m=15)
        x_row = np.array([0.0])
        vs_full = venn_multical(
            SquaredError(), ds, "f", BasisSpec(num_knots=2), x_row, 0.1, grid
        )
        vs_ext = venn_multical(
            SquaredError(), ds, "f", BasisSpec(num_knots=2), x_row, 0.1, grid,
            mode="extremes",
        )
        assert vs_ext.predictions[0] == pytest.approx(vs_full.predictions[0], abs=1e-10)
        assert vs_ext.predictions[-1] == pytest.approx(vs_full.predictions[-1], abs=1e-10)
        assert vs_ext.lo == pytest.approx(vs_full.lo, abs=1e-8)
        assert vs_ext.hi == pytest.approx(vs_full.hi, abs=1e-8)

    def test_strict_knots_mode_runs(self, rng):
        ds = self._dataset(rng, n=25)
        grid = ImputationGrid.equal_frequency(ds.y, m=5)
        vs = venn_multical(
            SquaredError(), ds, "f", BasisSpec(num_knots=2), np.array([0.0]), 0.1, grid,
            strict_knots=True,
        )
        assert vs.predictions.shape[0] == 5

    def test_pinball_multical_grid(self, rng):
        ds = self._dataset(rng, n=30)
        grid = ImputationGrid.equal_frequency(ds.y, m=5)
        vs = venn_multical(
            Pinball(0.2), ds, "f", BasisSpec(intercept=True, num_knots=0),
            np.array([0.3]), 0.34, grid,
        )
        assert np.all(np.isfinite(vs.predictions))


class TestMulticalibrationError:
    def test_orthogonal_residuals_zero(self, rng):
        phi = np.column_stack([np.ones(4), np.array([1.0, -1.0, 1.0, -1.0])])
        dm = DesignMatrix(values=phi, column_names=("a", "b"))
        y = np.array([1.0, 1.0, -1.0, -1.0])
        assert multicalibration_error(np.zeros(4), dm, y) == 0.0

    def test_intercept_only_is_abs_mean_residual(self, rng):
        dm = DesignMatrix(values=np.ones((5, 1)), column_names=("intercept",))
        y = rng.normal(size=5)
        preds = rng.normal(size=5)
        assert multicalibration_error(preds, dm, y) == pytest.approx(
            abs(np.mean(y - preds)), abs=1e-12
        )

    def test_hand_computed_example(self):
        dm = DesignMatrix(
            values=np.column_stack([np.ones(2), np.array([0.0, 1.0])]),
            column_names=("one", "x"),
        )
        got = multicalibration_error(np.zeros(2), dm, np.array([1.0, 1.0]))
        assert got == pytest.approx(np.sqrt(1.25), abs=1e-12)


def test_quantile_gap_zero_only_at_minimizers(rng):
    dm = DesignMatrix(values=np.ones((5, 1)), column_names=("intercept",))
    r = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    gap_at_min = quantile_subgradient_gap(np.array([3.0]), dm.values, r, 0.5, 0.0)
    gap_off = quantile_subgradient_gap(np.array([2.5]), dm.values, r, 0.5, 0.0)
    assert gap_at_min == 0.0
    assert gap_off > 0.0


class TestOffsetQuantileAgainstLinearProgram:
    @staticmethod
    def _lp_objective(phi, r, alpha):
        from scipy.optimize import linprog

        n, m = phi.shape
        c = np.concatenate([np.zeros(m), np.full(n, 1 - alpha), np.full(n, alpha)])
        a_eq = np.hstack([phi, np.eye(n), -np.eye(n)])
        res = linprog(
            c,
            A_eq=a_eq,
            b_eq=r,
            bounds=[(None, None)] * m + [(0, None)] * (2 * n),
            method="highs",
        )
        assert res.success
        return float(res.fun)

    def test_irls_objective_matches_lp(self, rng):
        from conftest import pinball_objective

        for _ in range(20):
            n = int(rng.integers(15, 80))
            m = int(rng.integers(2, 6))
            dm = _design(rng, n, m)
            r = rng.normal(size=n) * 2 + dm.values @ rng.normal(size=m)
            alpha = float(rng.uniform(0.1, 0.5))
            fit = fit_offset_quantile(r, dm, alpha)
            obj = pinball_objective(
                Pinball(alpha), 0.0, r - dm.values @ fit.beta
            )
            lp = self._lp_objective(dm.values, r, alpha)
            assert obj <= lp + 1e-6 * max(1.0, lp)
