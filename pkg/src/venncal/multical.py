"""Venn multicalibration over finite-dimensional function classes.

The function class G is the linear span of a deterministic basis: an
intercept, per-continuous-feature cubic polynomials plus truncated-power
spline terms (x - k)^3_+ with equal-frequency knots, and drop-first
one-hot indicators for categorical features.

Multicalibrating a model f against G means solving the offset problem

    g* = argmin_{g in G} sum_i l(f(X_i) + g(X_i), z_i)

For squared error this is offset least squares on the residuals, and
augmented refits (one per imputed outcome) reduce to Sherman-Morrison
rank-one updates of the Gram inverse.  For pinball losses the offset
quantile regression is solved by IRLS on a smoothed objective followed by
a subgradient verification pass; designs that are disjoint {0,1}
partitions (including intercept-only) are solved exactly by per-group
weighted quantiles with the left-endpoint convention.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CalibrationWarning,
    Categorical,
    Continuous,
    Dataset,
    DegenerateUpdateError,
    DomainError,
    FitError,
    InvalidInputError,
    LossSpec,
    Pinball,
    ScorePinball,
    SolverError,
    SquaredError,
    _pinball_alpha,
    _require_finite,
    exact_pinball_rank,
)
from .venn import ImputationGrid, VennSet

__all__ = [
    "BasisSpec",
    "FittedBasis",
    "DesignMatrix",
    "OffsetFit",
    "QuantileSolverConfig",
    "build_basis",
    "fit_offset_ls",
    "sm_augment",
    "fit_offset_quantile",
    "venn_multical",
    "multicalibration_error",
]


@dataclass(frozen=True)
class BasisSpec:
    """Configuration of the basis spanning G.

    num_knots applies to every continuous feature unless overridden per
    feature index via per_feature_knots; knots sit at equal-frequency
    quantiles of the calibration values.
    """

    intercept: bool = True
    num_knots: int = 5
    per_feature_knots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_knots < 0:
            raise InvalidInputError("num_knots must be >= 0")

    def knots_for(self, j: int) -> int:
        return int(self.per_feature_knots.get(j, self.num_knots))


@dataclass(frozen=True)
class FittedBasis:
    """Frozen basis: knot locations fixed from the calibration data."""

    spec: BasisSpec
    feature_kinds: tuple
    knots: tuple  # per feature: tuple of knot locations (empty if none/categorical)
    active_continuous: tuple  # continuous feature indices contributing columns
    column_names: tuple

    @property
    def m(self) -> int:
        return len(self.column_names)

    def expand(self, features) -> np.ndarray:
        """Evaluate the basis on rows of raw features (knots stay frozen)."""
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        cols = []
        if self.spec.intercept:
            cols.append(np.ones(feats.shape[0]))
        for j in self.active_continuous:
            x = feats[:, j]
            cols.extend([x, x**2, x**3])
            for k in self.knots[j]:
                cols.append(np.maximum(x - k, 0.0) ** 3)
        for j, kind in enumerate(self.feature_kinds):
            if isinstance(kind, Categorical):
                codes = feats[:, j].astype(int)
                for level in range(1, kind.levels):  # drop-first
                    cols.append((codes == level).astype(np.float64))
        return np.column_stack(cols)


@dataclass(frozen=True)
class DesignMatrix:
    """Evaluated basis with optional cached (Gram + ridge*I) inverse."""

    values: np.ndarray
    column_names: tuple
    basis: FittedBasis | None = None
    gram: np.ndarray | None = None
    gram_inverse: np.ndarray | None = None
    ridge: float | None = None

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        _require_finite("design values", vals)
        if len(self.column_names) != vals.shape[1]:
            raise InvalidInputError("column_names length must match design width")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def with_gram_inverse(self, ridge: float = 0.0) -> "DesignMatrix":
        """Cache (Phi'Phi + ridge*I)^{-1}, verifying the max-norm residual <= 1e-6."""
        gram = self.values.T @ self.values
        a = gram + ridge * np.eye(self.m)
        try:
            inv = np.linalg.inv(a)
        except np.linalg.LinAlgError as exc:
            raise FitError(
                "Gram matrix is singular; pass ridge > 0 to regularize"
            ) from exc
        resid = np.max(np.abs(a @ inv - np.eye(self.m)))
        if not np.isfinite(resid) or resid > 1e-6:
            raise FitError(
                f"Gram inverse residual {resid:.2e} exceeds 1e-6; increase ridge"
            )
        return replace(self, gram=gram, gram_inverse=inv, ridge=float(ridge))


def build_basis(dataset: Dataset, spec: BasisSpec) -> DesignMatrix:
    """Construct the design matrix of the additive spline basis on a dataset.

    Column order is deterministic: intercept, then per continuous feature
    x, x^2, x^3 and one truncated-power column per knot, then drop-first
    one-hot columns per categorical feature.  Knot counts are clamped when
    a feature lacks enough distinct values (with a warning); all-constant
    continuous features contribute only through the intercept.
    """
    kinds = dataset.feature_kinds
    knots: list = [()] * dataset.p
    active = []
    names = []
    if spec.intercept:
        names.append("intercept")
    for j, kind in enumerate(kinds):
        if not isinstance(kind, Continuous):
            continue
        x = dataset.features[:, j]
        distinct = np.unique(x)
        if distinct.shape[0] <= 1:
            warnings.warn(
                f"feature {j} is constant; it contributes only through the intercept",
                CalibrationWarning,
                stacklevel=2,
            )
            continue
        want = spec.knots_for(j)
        if want > 0:
            levels = np.arange(1, want + 1) / (want + 1)
            ks = np.unique(np.quantile(x, levels))
            ks = ks[(ks > distinct[0]) & (ks < distinct[-1])]
            if ks.shape[0] < want:
                warnings.warn(
                    f"feature {j}: clamped knot count {want} -> {ks.shape[0]}",
                    CalibrationWarning,
                    stacklevel=2,
                )
            knots[j] = tuple(float(k) for k in ks)
        active.append(j)
        names.extend([f"x{j}", f"x{j}^2", f"x{j}^3"])
        names.extend(f"x{j}_tp{i}" for i in range(len(knots[j])))
    for j, kind in enumerate(kinds):
        if isinstance(kind, Categorical):
            names.extend(f"x{j}_lvl{level}" for level in range(1, kind.levels))
    if not names:
        raise DomainError("basis has no columns; enable the intercept or add features")
    fitted = FittedBasis(
        spec=spec,
        feature_kinds=kinds,
        knots=tuple(knots),
        active_continuous=tuple(active),
        column_names=tuple(names),
    )
    return DesignMatrix(
        values=fitted.expand(dataset.features), column_names=fitted.column_names, basis=fitted
    )


# ---------------------------------------------------------------------------
# offset least squares + Sherman-Morrison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OffsetFit:
    """Solution of an offset loss minimization over the basis coefficients."""

    beta: np.ndarray
    loss_kind: str
    optimality_gap: float
    ridge: float = 0.0
    n: int = 0
    tolerance: float = 0.0
    xty: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).ravel())

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return np.atleast_2d(rows) @ self.beta

    def to_json_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "loss_kind": self.loss_kind,
            "optimality_gap": self.optimality_gap,
            "ridge": self.ridge,
            "n": self.n,
        }


def fit_offset_ls(
    residuals, design: DesignMatrix, ridge: float = 0.0, tolerance: float = 1e-8
) -> OffsetFit:
    """Offset least squares: beta = (Phi'Phi + ridge*I)^{-1} Phi' r.

    One iterative-refinement pass keeps the first-order gap near machine
    precision; `optimality_gap` is the unridged orthogonality defect
    max_j |sum_i b_j(x_i)(r_i - phi_i' beta)|.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    phi = design.values
    if r.shape[0] != phi.shape[0]:
        raise InvalidInputError("residuals must align with design rows")
    _require_finite("residuals", r)
    m = design.m
    gram = design.gram if design.gram is not None else phi.T @ phi
    a = gram + ridge * np.eye(m)
    xty = phi.T @ r
    try:
        beta = np.linalg.solve(a, xty)
        beta = beta + np.linalg.solve(a, xty - a @ beta)
    except np.linalg.LinAlgError as exc:
        if ridge == 0.0:
            raise FitError("singular Gram with ridge=0; refit with ridge > 0") from exc
        raise
    gap = float(np.max(np.abs(xty - gram @ beta)))
    scale = 1.0 + float(np.max(np.abs(xty)))
    ridged_gap = float(np.max(np.abs(xty - a @ beta)))
    if not np.isfinite(gap) or ridged_gap > 1e-6 * scale:
        if ridge == 0.0:
            raise FitError("singular Gram with ridge=0; refit with ridge > 0")
        raise SolverError(f"offset least squares did not converge (gap={gap:.2e})", gap)
    return OffsetFit(
        beta=beta,
        loss_kind="squared_error",
        optimality_gap=gap,
        ridge=float(ridge),
        n=design.n,
        tolerance=tolerance,
        xty=xty,
    )


def sm_augment(
    fit: OffsetFit, design: DesignMatrix, new_row, new_residual: float
) -> OffsetFit:
    """Exact least-squares coefficients after adding one (row, residual) pair.

    Uses the Sherman-Morrison rank-one update of the cached Gram inverse:
    beta_new = beta + A^{-1}phi (r_new - phi'beta) / (1 + phi'A^{-1}phi).
    Matches a full refit on the augmented problem to float accuracy.
    """
    if design.gram_inverse is None or design.gram is None:
        raise FitError("sm_augment needs a design with a cached gram inverse")
    if fit.xty is None:
        raise InvalidInputError("sm_augment needs the fit produced by fit_offset_ls")
    phi = np.asarray(new_row, dtype=np.float64).ravel()
    if phi.shape[0] != design.m:
        raise InvalidInputError("new_row width must match the design")
    _require_finite("new_row", phi)
    u = design.gram_inverse @ phi
    denom = 1.0 + float(phi @ u)
    if denom <= 1e-12:
        raise DegenerateUpdateError(
            f"rank-one denominator {denom:.2e} <= 1e-12; fall back to a full refit"
        )
    resid_at_new = float(new_residual) - float(phi @ fit.beta)
    beta_new = fit.beta + u * (resid_at_new / denom)
    xty_new = fit.xty + phi * float(new_residual)
    gram_new_beta = design.gram @ beta_new + phi * float(phi @ beta_new)
    gap = float(np.max(np.abs(xty_new - gram_new_beta)))
    return OffsetFit(
        beta=beta_new,
        loss_kind="squared_error",
        optimality_gap=gap,
        ridge=fit.ridge,
        n=fit.n + 1,
        tolerance=fit.tolerance,
        xty=xty_new,
    )


# ---------------------------------------------------------------------------
# offset quantile regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileSolverConfig:
    """Smoothed-IRLS settings; tolerance is per-sample (scaled by n in the check)."""

    eps_final: float = 1e-8
    max_inner: int = 60
    tolerance: float = 1e-6
    kink_tol: float = 1e-7
    damping: float = 1e-12


def _pinball_objective(beta, phi, r, alpha):
    u = r - phi @ beta
    return float(np.sum(np.where(u >= 0, (1.0 - alpha) * u, -alpha * u)))


def quantile_subgradient_gap(beta, phi, r, alpha, kink_tol) -> float:
    """max_j dist(0, sum_i b_j(x_i) * dl-interval_i) at the candidate solution.

    Samples with |r_i - phi_i'beta| <= kink_tol contribute the full interval
    [alpha - 1, alpha]; others the single derivative alpha - 1{r_i >= q_i}.
    """
    u = r - phi @ beta
    at_kink = np.abs(u) <= kink_tol
    point = alpha - (u >= 0).astype(np.float64)
    lo_pt = np.where(at_kink, alpha - 1.0, point)
    hi_pt = np.where(at_kink, alpha, point)
    pos = phi >= 0
    lo = np.sum(np.where(pos, phi * lo_pt[:, None], phi * hi_pt[:, None]), axis=0)
    hi = np.sum(np.where(pos, phi * hi_pt[:, None], phi * lo_pt[:, None]), axis=0)
    return float(np.max(np.maximum(0.0, np.maximum(lo, -hi))))


def _is_partition_design(phi: np.ndarray) -> bool:
    """Detect disjoint {0,1} group indicators covering every row exactly once."""
    if not np.all((phi == 0.0) | (phi == 1.0)):
        return False
    return bool(np.all(phi.sum(axis=1) == 1.0))


def _irls_smoothed_pinball(phi, r, alpha, cfg: QuantileSolverConfig) -> np.ndarray:
    n, m = phi.shape
    tau = 1.0 - alpha
    beta = np.linalg.lstsq(phi, r, rcond=None)[0]
    lam = cfg.damping * max(1.0, float(np.trace(phi.T @ phi)) / m)
    eye = lam * np.eye(m)
    col_sum = phi.sum(axis=0)
    scale = max(1.0, float(np.max(np.abs(r))) if n else 1.0)
    eps = scale
    while True:
        for _ in range(cfg.max_inner):
            u = r - phi @ beta
            w = 0.5 / np.sqrt(u * u + eps * eps)
            a = (phi * w[:, None]).T @ phi + eye
            b = phi.T @ (w * r) + (tau - 0.5) * col_sum
            new = np.linalg.solve(a, b)
            done = np.max(np.abs(new - beta)) <= 1e-12 * max(1.0, float(np.max(np.abs(beta))))
            beta = new
            if done:
                break
        if eps <= cfg.eps_final:
            break
        eps = max(eps / 10.0, cfg.eps_final)
    return beta


def _vertex_polish(phi, r, alpha, beta) -> np.ndarray:
    """Snap to the interpolating vertex suggested by the smallest residuals."""
    n, m = phi.shape
    if n < m:
        return beta
    idx = np.argsort(np.abs(r - phi @ beta), kind="stable")[:m]
    sub = phi[idx]
    try:
        cand = np.linalg.solve(sub, r[idx])
    except np.linalg.LinAlgError:
        return beta
    if not np.all(np.isfinite(cand)):
        return beta
    if _pinball_objective(cand, phi, r, alpha) <= _pinball_objective(beta, phi, r, alpha) + 1e-9:
        return cand
    return beta


def fit_offset_quantile(
    residual_scores,
    design: DesignMatrix,
    alpha: float,
    config: QuantileSolverConfig = QuantileSolverConfig(),
) -> OffsetFit:
    """Offset quantile regression: minimize the pinball loss of Phi beta.

    ``residual_scores`` are the offset-form targets s_i - f_i.  Intercept-only
    and disjoint-partition designs are solved exactly (per-group weighted
    left quantiles); otherwise smoothed IRLS runs with eps decreasing to
    ``config.eps_final``, a vertex polish, and a subgradient verification
    pass that must reach ``config.tolerance * n``.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0, 1)")
    r = np.asarray(residual_scores, dtype=np.float64).ravel()
    phi = design.values
    if r.shape[0] != phi.shape[0]:
        raise InvalidInputError("residual scores must align with design rows")
    _require_finite("residual scores", r)
    n, m = phi.shape
    if n == 0:
        raise DomainError("offset quantile regression needs at least one sample")
    scale = max(1.0, float(np.max(np.abs(r))))
    kink_tol = config.kink_tol * scale

    if m == 1 and np.all(phi[:, 0] == phi[0, 0]) and phi[0, 0] > 0:
        c = float(phi[0, 0])
        k = exact_pinball_rank(alpha, n)
        q = float(np.sort(r, kind="stable")[k - 1])
        beta = np.array([q / c])
        gap = quantile_subgradient_gap(beta, phi, r, alpha, kink_tol=0.0)
    elif _is_partition_design(phi):
        beta = np.empty(m)
        for j in range(m):
            mask = phi[:, j] == 1.0
            if not np.any(mask):
                raise FitError(f"partition column {design.column_names[j]!r} has no members")
            k = exact_pinball_rank(alpha, int(mask.sum()))
            beta[j] = float(np.sort(r[mask], kind="stable")[k - 1])
        gap = quantile_subgradient_gap(beta, phi, r, alpha, kink_tol=0.0)
    else:
        beta = _irls_smoothed_pinball(phi, r, alpha, config)
        beta = _vertex_polish(phi, r, alpha, beta)
        gap = quantile_subgradient_gap(beta, phi, r, alpha, kink_tol)
        if gap > config.tolerance * n:
            raise SolverError(
                f"offset quantile solver stalled: gap {gap:.3e} > {config.tolerance * n:.3e}",
                gap,
            )
    return OffsetFit(
        beta=beta,
        loss_kind="pinball",
        optimality_gap=gap,
        ridge=0.0,
        n=n,
        tolerance=config.tolerance * n,
    )


# ---------------------------------------------------------------------------
# Venn multicalibration
# ---------------------------------------------------------------------------


def _loss_targets(loss: LossSpec, dataset: Dataset) -> np.ndarray:
    if isinstance(loss, ScorePinball):
        return loss.score.apply(dataset)
    return dataset.y


def venn_multical(
    loss: LossSpec,
    dataset: Dataset,
    pred_column: str,
    basis: BasisSpec,
    x_row,
    x_pred: float,
    grid: ImputationGrid,
    mode: str = "full",
    ridge: float = 1e-10,
    strict_knots: bool = False,
    solver: QuantileSolverConfig = QuantileSolverConfig(),
    monotonicity_subgrid: int = 9,
) -> VennSet:
    """Venn multicalibration: offset refits on C_n + {(x, y)} per imputed y.

    Returns the set {f(x) + g^{(x,y)}(x) : y in grid}.  Squared error uses
    the Sherman-Morrison fast path on a cached Gram inverse; pinball losses
    solve an offset quantile regression per grid point.  ``mode='extremes'``
    evaluates only the grid endpoints and requires a monotonicity check on
    a coarse subgrid to pass first.

    With ``strict_knots`` the spline knots are recomputed on every augmented
    dataset (exchangeable processing, no fast path); by default knots are
    frozen from the calibration data.
    """
    if mode not in ("full", "extremes"):
        raise InvalidInputError("mode must be 'full' or 'extremes'")
    f_cal = dataset.pred(pred_column)
    z_cal = _loss_targets(loss, dataset)
    x_row = np.asarray(x_row, dtype=np.float64).ravel()
    if x_row.shape[0] != dataset.p:
        raise InvalidInputError("x_row width must match the dataset features")
    x_pred = float(x_pred)

    if strict_knots:
        return _venn_multical_strict(
            loss, dataset, f_cal, z_cal, basis, x_row, x_pred, grid, ridge, solver
        )

    design = build_basis(dataset, basis)
    phi_x = design.basis.expand(x_row[None, :])[0]
    r_cal = z_cal - f_cal

    def all_predictions(values: np.ndarray) -> np.ndarray:
        out = np.empty(values.shape[0])
        if isinstance(loss, SquaredError):
            cached = design.with_gram_inverse(ridge)
            base = fit_offset_ls(r_cal, cached, ridge=ridge)
            for i, y in enumerate(values):
                fit_y = sm_augment(base, cached, phi_x, float(y) - x_pred)
                out[i] = x_pred + float(phi_x @ fit_y.beta)
        elif isinstance(loss, (Pinball, ScorePinball)):
            alpha = _pinball_alpha(loss)
            phi_aug = np.vstack([design.values, phi_x])
            design_aug = DesignMatrix(values=phi_aug, column_names=design.column_names)
            r_aug = np.append(r_cal, 0.0)
            for i, y in enumerate(values):
                r_aug[-1] = float(y) - x_pred
                try:
                    fit_y = fit_offset_quantile(r_aug, design_aug, alpha, solver)
                except FitError as exc:
                    raise FitError(f"grid point y={y}: {exc}") from exc
                out[i] = x_pred + float(phi_x @ fit_y.beta)
        else:
            raise InvalidInputError(f"unsupported loss {loss!r}")
        return out

    if mode == "extremes":
        sub_idx = np.unique(
            np.round(np.linspace(0, grid.m - 1, num=min(monotonicity_subgrid, grid.m)))
        ).astype(int)
        sub_pred = all_predictions(grid.values[sub_idx])
        if np.any(np.diff(sub_pred) < 0):
            raise FitError(
                "imputation map is not monotone on the coarse subgrid; "
                "extremes mode is invalid here, use mode='full'"
            )
        lo_hi = all_predictions(grid.values[[0, -1]])
        return VennSet(
            x_key=x_pred, imputed_y=grid.values[[0, -1]], predictions=lo_hi
        )
    return VennSet(x_key=x_pred, imputed_y=grid.values, predictions=all_predictions(grid.values))


def _venn_multical_strict(
    loss, dataset, f_cal, z_cal, basis, x_row, x_pred, grid, ridge, solver
):
    """Recompute knots on each augmented dataset (no Sherman-Morrison path)."""
    aug_features = np.vstack([dataset.features, x_row[None, :]])
    aug_f = np.append(f_cal, x_pred)
    out = np.empty(grid.m)
    for i, y in enumerate(grid.values):
        aug_ds = Dataset(
            features=aug_features,
            y=np.append(dataset.y, y),
            feature_kinds=dataset.feature_kinds,
        )
        design = build_basis(aug_ds, basis)
        phi_x = design.values[-1]
        # grid values live in target space: outcomes for SquaredError/Pinball,
        # imputed scores for ScorePinball
        r_aug = np.append(z_cal, y) - aug_f
        if isinstance(loss, SquaredError):
            fit_y = fit_offset_ls(r_aug, design, ridge=ridge)
        else:
            fit_y = fit_offset_quantile(r_aug, design, _pinball_alpha(loss), solver)
        out[i] = x_pred + float(phi_x @ fit_y.beta)
    return VennSet(x_key=float(x_pred), imputed_y=grid.values, predictions=out)


def multicalibration_error(model_preds, design: DesignMatrix, y) -> float:
    """l2 norm of the per-basis-column mean residual products.

    ||( (1/n) sum_i b_j(x_i)(y_i - yhat_i) )_{j=1..m}||_2 - zero exactly when
    the residuals are orthogonal to every basis column.
    """
    preds = np.asarray(model_preds, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if preds.shape[0] != y.shape[0] or preds.shape[0] != design.n:
        raise InvalidInputError("model_preds, y and design rows must align")
    r = y - preds
    return float(np.linalg.norm(design.values.T @ r / design.n))
