"""Experiment orchestration: split, calibrate, predict, score, report.

Replications are driven by spawned seed sequences, so identical configs
produce byte-identical reports.  Coverage indicators for the Venn CP
methods are computed exactly: membership of the true outcome is decided by
augmenting with its own conformity score (the pointwise definition of the
interval), while interval widths come from a grid sweep on a configurable
subset of test points.

A canary guards against information leakage: every row outside the
calibration split is poisoned, and each method runner asserts the canary
values it receives are clean before fitting.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..calibrators import BinningConfig, isotonic_calibrate
from ..conformal import (
    ConformalSet,
    marginal_baseline,
    mondrian_baseline,
    prediction_bin_groups,
    symmetric_y_grid,
    venn_cp_interval,
)
from ..core import (
    Dataset,
    DomainError,
    InvalidInputError,
    Pinball,
    SquaredError,
    VennCalError,
)
from ..metrics import EvalReport, cce, coverage_and_width
from ..multical import BasisSpec, build_basis, fit_offset_ls, venn_multical
from ..venn import (
    Histogram,
    ImputationGrid,
    Isotonic,
    oracle_prediction,
    venn_calibrate,
)
from .csv_io import ColumnRoles, load_csv, write_csv
from .synth import gen_synthetic, make_dgp

__all__ = [
    "ExperimentConfig",
    "SplitSpec",
    "RunResult",
    "split_indices",
    "run_experiment",
]

_METHODS = ("venn", "venn-abers", "multical", "cp-venn", "cp-marginal", "cp-mondrian")
_SCHEMA_VERSION = 1
_OUTPUT_DIR_ENV = "VENNCAL_OUTPUT_DIR"


def _default_output_dir() -> str:
    return os.environ.get(_OUTPUT_DIR_ENV, "venncal-out")


class LeakageError(VennCalError, AssertionError):
    """A poisoned (non-calibration) row reached a calibration stage."""


@dataclass(frozen=True)
class SplitSpec:
    train: float
    cal: float
    test: float
    seed: int

    def __post_init__(self):
        fracs = (self.train, self.cal, self.test)
        if any(f <= 0 for f in fracs):
            raise InvalidInputError("split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidInputError("split fractions must sum to 1")


def _strict_keys(d: dict, allowed: set, where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(extra)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (strict: unknown keys are errors)."""

    data: dict
    split: SplitSpec
    method: dict
    alpha: float = 0.1
    loss: dict = field(default_factory=lambda: {"kind": "se"})
    y_bins: int = 200
    pred_bins: int = 200
    basis: BasisSpec = field(default_factory=BasisSpec)
    replications: int = 1
    output_dir: str = field(default_factory=_default_output_dir)
    figures: bool = True
    rescale_y: bool = False
    columns: dict = field(
        default_factory=lambda: {"pred": "f", "mu": "mu", "quantile": "score_q_miscal"}
    )

    def __post_init__(self):
        if self.replications < 1:
            raise InvalidInputError("replications must be >= 1")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError("alpha must lie in (0, 1)")
        name = self.method.get("name")
        if name not in _METHODS:
            raise InvalidInputError(f"method must be one of {_METHODS}, got {name!r}")

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        _strict_keys(
            d,
            {
                "schema_version",
                "data",
                "split",
                "method",
                "alpha",
                "loss",
                "grids",
                "basis",
                "replications",
                "output_dir",
                "figures",
                "rescale_y",
                "columns",
            },
            "config",
        )
        version = d.get("schema_version")
        if version != _SCHEMA_VERSION:
            raise InvalidInputError(
                f"unsupported schema_version {version!r}; expected {_SCHEMA_VERSION}"
            )
        data = dict(d["data"])
        _strict_keys(data, {"kind", "dgp", "n", "path", "roles"}, "data")
        split_d = dict(d["split"])
        _strict_keys(split_d, {"train", "cal", "test", "seed"}, "split")
        split = SplitSpec(
            train=float(split_d["train"]),
            cal=float(split_d["cal"]),
            test=float(split_d["test"]),
            seed=int(split_d["seed"]),
        )
        method = dict(d["method"])
        _strict_keys(
            method,
            {"name", "calibrator", "bins", "intervals", "width_points", "mode", "strict_knots"},
            "method",
        )
        grids = dict(d.get("grids", {}))
        _strict_keys(grids, {"y_bins", "pred_bins"}, "grids")
        basis_d = dict(d.get("basis", {}))
        _strict_keys(basis_d, {"intercept", "num_knots"}, "basis")
        loss_d = dict(d.get("loss", {"kind": "se"}))
        _strict_keys(loss_d, {"kind", "alpha"}, "loss")
        return cls(
            data=data,
            split=split,
            method=method,
            alpha=float(d.get("alpha", 0.1)),
            loss=loss_d,
            y_bins=int(grids.get("y_bins", 200)),
            pred_bins=int(grids.get("pred_bins", 200)),
            basis=BasisSpec(
                intercept=bool(basis_d.get("intercept", True)),
                num_knots=int(basis_d.get("num_knots", 5)),
            ),
            replications=int(d.get("replications", 1)),
            output_dir=str(d.get("output_dir", _default_output_dir())),
            figures=bool(d.get("figures", True)),
            rescale_y=bool(d.get("rescale_y", False)),
            columns=dict(d.get("columns", {"pred": "f", "mu": "mu", "quantile": "score_q_miscal"})),
        )


def split_indices(n: int, spec: SplitSpec, rng: np.random.Generator):
    """Disjoint, exhaustive train/cal/test partition of range(n)."""
    perm = rng.permutation(n)
    n_train = int(round(spec.train * n))
    n_cal = int(round(spec.cal * n))
    n_train = max(1, min(n_train, n - 2))
    n_cal = max(1, min(n_cal, n - n_train - 1))
    train = perm[:n_train]
    cal = perm[n_train : n_train + n_cal]
    test = perm[n_train + n_cal :]
    if len(test) < 1:
        raise DomainError(f"split leaves no test rows for n={n}")
    return train, cal, test


def _assert_clean_canary(canary_values: np.ndarray, stage: str) -> None:
    if np.any(canary_values != 0.0):
        raise LeakageError(f"poisoned rows reached the {stage} stage")


def _loss_from_config(loss_d: dict, default_alpha: float):
    kind = loss_d.get("kind", "se")
    if kind in ("se", "squared_error"):
        return SquaredError()
    if kind == "pinball":
        return Pinball(float(loss_d.get("alpha", default_alpha)))
    raise InvalidInputError(f"unknown loss kind {kind!r}")


@dataclass
class _RepData:
    """One replication's materialized split."""

    dataset: Dataset
    train_idx: np.ndarray
    cal_idx: np.ndarray
    test_idx: np.ndarray
    canary: np.ndarray
    oracle: object | None = None

    @property
    def cal(self) -> Dataset:
        return self.dataset.subset(self.cal_idx)

    @property
    def test(self) -> Dataset:
        return self.dataset.subset(self.test_idx)


@dataclass(frozen=True)
class RunResult:
    reports: tuple
    aggregate: dict
    errors: tuple
    output_dir: str


def _materialize(config: ExperimentConfig, rep: int, base_dataset, seed_children):
    child = seed_children[rep]
    state = child.generate_state(2)
    data_seed, split_seed = int(state[0]), int(state[1])
    oracle = None
    if config.data["kind"] == "synthetic":
        dataset, oracle = gen_synthetic(
            make_dgp(config.data["dgp"]), int(config.data["n"]), data_seed, alpha=config.alpha
        )
    else:
        dataset = base_dataset
    rng = np.random.default_rng(split_seed)
    train, cal, test = split_indices(dataset.n, config.split, rng)
    canary = np.ones(dataset.n)
    canary[cal] = 0.0
    return _RepData(
        dataset=dataset, train_idx=train, cal_idx=cal, test_idx=test, canary=canary, oracle=oracle
    )


def _rescale_outcome_units(rep: _RepData, columns: dict) -> _RepData:
    """Affinely map outcomes (and outcome-unit columns) to [0, 1].

    The scaling is computed from train+cal rows only, so the test split
    cannot inform it.
    """
    ds = rep.dataset
    fit_rows = np.concatenate([rep.train_idx, rep.cal_idx])
    lo = float(ds.y[fit_rows].min())
    hi = float(ds.y[fit_rows].max())
    span = hi - lo if hi > lo else 1.0
    new_cols = {}
    outcome_unit = {columns.get("pred"), columns.get("mu")}
    for name, col in ds.pred_columns.items():
        if name in outcome_unit:
            new_cols[name] = (col - lo) / span
        elif name in (columns.get("quantile"),):
            new_cols[name] = col / span  # score units scale without the shift
        else:
            new_cols[name] = col
    scaled = Dataset(
        features=ds.features,
        y=(ds.y - lo) / span,
        pred_columns=new_cols,
        feature_kinds=ds.feature_kinds,
    )
    return _RepData(
        dataset=scaled,
        train_idx=rep.train_idx,
        cal_idx=rep.cal_idx,
        test_idx=rep.test_idx,
        canary=rep.canary,
        oracle=rep.oracle,
    )


# ---------------------------------------------------------------------------
# method runners
# ---------------------------------------------------------------------------


def _cp_common(rep: _RepData, columns: dict):
    cal, test = rep.cal, rep.test
    _assert_clean_canary(rep.canary[rep.cal_idx], "calibration")
    mu_col = columns.get("mu", "mu")
    q_col = columns.get("quantile", "score_q_miscal")
    cal_scores = np.abs(cal.y - cal.pred(mu_col))
    cal_qpred = cal.pred(q_col)
    test_mu = test.pred(mu_col)
    test_qpred = test.pred(q_col)
    test_scores = np.abs(test.y - test_mu)
    fstar = isotonic_calibrate(Pinball(0.1), cal_qpred, cal_scores)
    return cal_scores, cal_qpred, test_mu, test_qpred, test_scores, fstar


def _uncal_extras(test_scores, test_qpred):
    return {"uncal_coverage": float(np.mean(test_scores <= test_qpred))}


def _run_cp_marginal(config, rep):
    cal_scores, _, test_mu, test_qpred, test_scores, fstar = _cp_common(rep, config.columns)
    sets = [marginal_baseline(cal_scores, config.alpha, float(m)) for m in test_mu]
    cov, width = coverage_and_width(sets, rep.test.y)
    err = cce(sets, rep.test.y, fstar(test_qpred), config.alpha)
    extras = _uncal_extras(test_scores, test_qpred)
    report = EvalReport(marginal_coverage=cov, avg_width=width, cce=err, extras=extras)
    return report, sets, {"x_key": test_mu, "oracle": rep.test.y}


def _run_cp_mondrian(config, rep):
    cal_scores, cal_qpred, test_mu, test_qpred, test_scores, fstar = _cp_common(
        rep, config.columns
    )
    bins = int(config.method.get("bins", 5))
    _, assign = prediction_bin_groups(cal_qpred, bins)
    cal_groups = assign(cal_qpred)
    test_groups = assign(test_qpred)
    sets = [
        mondrian_baseline(cal_scores, cal_groups, config.alpha, int(g), float(m))
        for g, m in zip(test_groups, test_mu)
    ]
    cov, width = coverage_and_width(sets, rep.test.y)
    err = cce(sets, rep.test.y, fstar(test_qpred), config.alpha)
    extras = _uncal_extras(test_scores, test_qpred)
    from ..metrics import group_coverage_table

    report = EvalReport(
        marginal_coverage=cov,
        avg_width=width,
        cce=err,
        per_group=group_coverage_table(sets, rep.test.y, test_groups),
        extras=extras,
    )
    return report, sets, {"x_key": test_mu, "oracle": rep.test.y}


def _cp_venn_algo(method: dict):
    kind = method.get("calibrator", "isotonic")
    if kind == "isotonic":
        return Isotonic()
    if kind == "histogram":
        return Histogram(BinningConfig(int(method.get("bins", 5))))
    raise InvalidInputError(f"unknown calibrator {kind!r}")


def _run_cp_venn(config, rep):
    from ..venn import _make_fitter

    cal_scores, cal_qpred, test_mu, test_qpred, test_scores, fstar = _cp_common(
        rep, config.columns
    )
    algo = _cp_venn_algo(config.method)
    fitter = _make_fitter(algo, Pinball(config.alpha), cal_qpred, cal_scores, None)
    # exact membership of the true outcome: augment with its own score
    covered = np.empty(rep.test.n, dtype=bool)
    for i in range(rep.test.n):
        thr = fitter.fit_eval(float(test_qpred[i]), float(test_scores[i]))
        covered[i] = test_scores[i] <= thr
    # grid intervals for widths on a subset of test points
    want_intervals = bool(config.method.get("intervals", True))
    n_width = rep.test.n if config.method.get("width_points") is None else int(
        config.method["width_points"]
    )
    widths = []
    sets: list[ConformalSet | None] = [None] * rep.test.n
    if want_intervals and n_width > 0:
        s_max = float(cal_scores.max()) * 1.5 + 1e-9
        for i in range(min(n_width, rep.test.n)):
            grid = symmetric_y_grid(float(test_mu[i]), s_max, num=config.y_bins)
            cs = venn_cp_interval(
                cal_qpred,
                cal_scores,
                algo,
                config.alpha,
                float(test_qpred[i]),
                float(test_mu[i]),
                grid,
            )
            sets[i] = cs
            widths.append(cs.width)
    cov = float(covered.mean())
    width = float(np.mean(widths)) if widths else float("nan")
    err = _cce_from_indicators(covered, fstar(test_qpred), config.alpha)
    extras = _uncal_extras(test_scores, test_qpred)
    extras["exact_coverage_rule"] = 1.0
    report = EvalReport(marginal_coverage=cov, avg_width=width, cce=err, extras=extras)
    made = [s for s in sets if s is not None]
    out_sets = made if len(made) == rep.test.n else _indicator_sets(covered, config.alpha)
    return report, out_sets, {"x_key": test_qpred, "oracle": rep.test.y}


def _indicator_sets(covered: np.ndarray, alpha: float):
    """Degenerate per-point sets encoding exact membership (for CSV output)."""
    full = ((-float("inf"), float("inf")),)
    return [
        ConformalSet(alpha=alpha, intervals=full if c else ())
        for c in covered
    ]


def _cce_from_indicators(covered, fstar_test, alpha, min_group: int = 5) -> float:
    from ..metrics import _merge_small_levels

    fstar_test = np.asarray(fstar_test)
    levels = np.unique(fstar_test)
    counts = {float(v): int(np.sum(fstar_test == v)) for v in levels}
    groups, _ = _merge_small_levels(levels, counts, min_group)
    n = fstar_test.shape[0]
    total = 0.0
    for members in groups:
        mask = np.isin(fstar_test, members)
        miscoverage = 1.0 - float(covered[mask].mean())
        total += (mask.sum() / n) * max(0.0, miscoverage - alpha)
    return total


def _run_venn_sets(config, rep):
    """Venn / Venn-Abers set calibration of the mean model on test points."""
    _assert_clean_canary(rep.canary[rep.cal_idx], "calibration")
    cal, test = rep.cal, rep.test
    pred_col = config.columns.get("pred", "f")
    loss = _loss_from_config(config.loss, config.alpha)
    if config.method["name"] == "venn-abers":
        algo = Isotonic()
    else:
        algo = _cp_venn_algo(config.method)
    grid = ImputationGrid.equal_frequency(cal.y, m=config.y_bins)
    cal_preds = cal.pred(pred_col)
    test_preds = test.pred(pred_col)
    lo = np.empty(test.n)
    hi = np.empty(test.n)
    oracle = np.empty(test.n)
    contained = np.empty(test.n, dtype=bool)
    for i in range(test.n):
        vs = venn_calibrate(algo, loss, cal_preds, cal.y, float(test_preds[i]), grid)
        lo[i], hi[i] = vs.lo, vs.hi
        oracle[i] = oracle_prediction(
            algo, loss, cal_preds, cal.y, float(test_preds[i]), float(test.y[i])
        )
        contained[i] = lo[i] <= oracle[i] <= hi[i]
    # the grid spans observed calibration outcomes, so containment is only
    # guaranteed for test outcomes inside that range; report both views
    in_range = (test.y >= cal.y.min()) & (test.y <= cal.y.max())
    extras = {
        "median_width": float(np.median(hi - lo)),
        "oracle_envelope_containment": float(contained.mean()),
        "containment_in_range": float(contained[in_range].mean()) if in_range.any() else 1.0,
    }
    if rep.oracle is not None and isinstance(loss, SquaredError):
        x0, g = test.features[:, 0], test.features[:, 1].astype(int)
        cond_mean = rep.oracle.cond_mean(x0, g)
        extras["oracle_rmse"] = float(np.sqrt(np.mean((oracle - cond_mean) ** 2)))
    report = EvalReport(
        marginal_coverage=float(contained.mean()),
        avg_width=float(np.mean(hi - lo)),
        cce=0.0,
        extras=extras,
    )
    sets = [
        ConformalSet(alpha=config.alpha, intervals=((float(a), float(b)),))
        for a, b in zip(lo, hi)
    ]
    return report, sets, {"x_key": test_preds, "oracle": oracle, "lo": lo, "hi": hi}


def _run_multical(config, rep):
    _assert_clean_canary(rep.canary[rep.cal_idx], "calibration")
    cal, test = rep.cal, rep.test
    pred_col = config.columns.get("pred", "f")
    loss = _loss_from_config(config.loss, config.alpha)
    grid = ImputationGrid.equal_frequency(cal.y, m=config.y_bins)
    mode = config.method.get("mode", "full")
    strict = bool(config.method.get("strict_knots", False))
    test_preds = test.pred(pred_col)
    lo = np.empty(test.n)
    hi = np.empty(test.n)
    oracle = np.empty(test.n)
    for i in range(test.n):
        vs = venn_multical(
            loss,
            cal,
            pred_col,
            config.basis,
            test.features[i],
            float(test_preds[i]),
            grid,
            mode=mode,
            strict_knots=strict,
        )
        lo[i], hi[i] = vs.lo, vs.hi
        grid_i = ImputationGrid.explicit([float(test.y[i])])
        oracle[i] = venn_multical(
            loss,
            cal,
            pred_col,
            config.basis,
            test.features[i],
            float(test_preds[i]),
            grid_i,
            strict_knots=strict,
        ).predictions[0]
    design_test = build_basis(cal, config.basis)
    phi_test = design_test.basis.expand(test.features)
    from ..multical import DesignMatrix, multicalibration_error

    dm_test = DesignMatrix(values=phi_test, column_names=design_test.column_names)
    uncal_err = multicalibration_error(test_preds, dm_test, test.y)
    point_fit = fit_offset_ls(
        cal.y - cal.pred(pred_col), design_test.with_gram_inverse(1e-10), ridge=1e-10
    )
    point_pred = test_preds + phi_test @ point_fit.beta
    point_err = multicalibration_error(point_pred, dm_test, test.y)
    venn_err = multicalibration_error(oracle, dm_test, test.y)
    contained = (lo <= oracle) & (oracle <= hi)
    report = EvalReport(
        marginal_coverage=float(contained.mean()),
        avg_width=float(np.mean(hi - lo)),
        cce=0.0,
        extras={
            "mc_error_uncal": uncal_err,
            "mc_error_pointcal": point_err,
            "mc_error_venn_oracle": venn_err,
            "median_width": float(np.median(hi - lo)),
        },
    )
    sets = [
        ConformalSet(alpha=config.alpha, intervals=((float(a), float(b)),))
        for a, b in zip(lo, hi)
    ]
    return report, sets, {"x_key": test_preds, "oracle": oracle, "lo": lo, "hi": hi}


_RUNNERS = {
    "cp-marginal": _run_cp_marginal,
    "cp-mondrian": _run_cp_mondrian,
    "cp-venn": _run_cp_venn,
    "venn": _run_venn_sets,
    "venn-abers": _run_venn_sets,
    "multical": _run_multical,
}


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run all replications, write artifacts, and return the report table.

    Per replication: split -> calibrate -> predict -> score.  A failing
    replication is recorded and the run continues.  Outputs under
    ``config.output_dir``: report.json, metrics.csv, per-test-point CSVs,
    band CSVs and (optionally) rendered figures.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_dataset = None
    if config.data["kind"] == "csv":
        base_dataset, _ = load_csv(config.data["path"], ColumnRoles.from_dict(config.data["roles"]))
    elif config.data["kind"] != "synthetic":
        raise InvalidInputError(f"unknown data kind {config.data['kind']!r}")
    seed_children = np.random.SeedSequence(config.split.seed).spawn(config.replications)
    runner = _RUNNERS[config.method["name"]]
    reports = []
    errors = []
    band_rows_all = []
    for rep_i in range(config.replications):
        try:
            rep = _materialize(config, rep_i, base_dataset, seed_children)
            if config.rescale_y:
                rep = _rescale_outcome_units(rep, config.columns)
            report, sets, bands = runner(config, rep)
        except VennCalError as exc:
            errors.append({"replication": rep_i, "error": f"{type(exc).__name__}: {exc}"})
            continue
        reports.append(report)
        y_test = rep.test.y
        point_rows = []
        for i, s in enumerate(sets):
            hull = s.hull
            lo_i, hi_i = hull if hull is not None else (float("nan"), float("nan"))
            point_rows.append(
                (lo_i, hi_i, int(s.contains(float(y_test[i]))), s.width)
            )
        write_csv(
            out / f"points_rep{rep_i:03d}.csv",
            ["lower", "upper", "covered", "width"],
            point_rows,
        )
        x_key = np.asarray(bands["x_key"], dtype=np.float64)
        lo_b = np.asarray(bands.get("lo", [s.hull[0] if s.hull else np.nan for s in sets]))
        hi_b = np.asarray(bands.get("hi", [s.hull[1] if s.hull else np.nan for s in sets]))
        oracle_b = np.asarray(bands["oracle"], dtype=np.float64)
        order = np.argsort(x_key, kind="stable")
        rows = [
            (float(x_key[j]), float(lo_b[j]), float(hi_b[j]), float(oracle_b[j]))
            for j in order
        ]
        write_csv(out / f"bands_rep{rep_i:03d}.csv", ["x_key", "lo", "hi", "oracle"], rows)
        if rep_i == 0:
            band_rows_all = rows
    aggregate = _aggregate(reports, errors, config)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if reports:
        header = sorted(reports[0].csv_fields().keys())
        write_csv(
            out / "metrics.csv",
            ["replication", *header],
            [
                (i, *[rep.csv_fields()[k] for k in header])
                for i, rep in enumerate(reports)
            ],
        )
    if config.figures and reports:
        from . import plots

        plots.save_band_figure(band_rows_all, out / "fig_bands.png", method=config.method["name"])
        plots.save_coverage_figure(
            [r.marginal_coverage for r in reports],
            1.0 - config.alpha,
            out / "fig_coverage.png",
        )
    return RunResult(
        reports=tuple(reports), aggregate=aggregate, errors=tuple(errors), output_dir=str(out)
    )


def _aggregate(reports, errors, config) -> dict:
    agg = {
        "method": config.method["name"],
        "alpha": config.alpha,
        "replications_requested": config.replications,
        "replications_completed": len(reports),
        "errors": errors,
    }
    if reports:
        for key in ("marginal_coverage", "avg_width", "cce"):
            vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            agg[f"{key}_mean"] = float(finite.mean()) if finite.size else None
            agg[f"{key}_std"] = float(finite.std(ddof=1)) if finite.size > 1 else 0.0
        extras_keys = sorted({k for r in reports for k in r.extras})
        for k in extras_keys:
            vals = np.array([float(r.extras.get(k, np.nan)) for r in reports])
            finite = vals[np.isfinite(vals)]
            agg[f"extra_{k}_mean"] = float(finite.mean()) if finite.size else None
    return agg
