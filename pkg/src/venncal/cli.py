"""Command-line interface.

Subcommands: calibrate, venn, venn-abers, multical, conformal, evaluate,
synth, run.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys

import numpy as np

from .calibrators import (
    BinningConfig,
    check_in_sample_calibration,
    histogram_calibrate,
    isotonic_calibrate,
    uniform_mass_bins,
)
from .conformal import (
    marginal_baseline,
    mondrian_baseline,
    multical_cp_interval,
    prediction_bin_groups,
    symmetric_y_grid,
    venn_cp_interval,
)
from .core import Pinball, SquaredError, VennCalError
from .harness.csv_io import ColumnRoles, load_csv, write_csv
from .harness.experiment import ExperimentConfig, run_experiment
from .harness.synth import gen_synthetic, make_dgp
from .metrics import EvalReport
from .multical import BasisSpec, build_basis, venn_multical
from .venn import Histogram, ImputationGrid, Isotonic, venn_batch, venn_calibrate

__all__ = ["main", "cli", "build_parser"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        if "unrecognized arguments" in message:
            bad = message.split(":", 1)[1].strip().split()
            known = [a for action in self._actions for a in action.option_strings]
            hints = []
            for b in bad:
                close = difflib.get_close_matches(b, known, n=1)
                if close:
                    hints.append(f"{b} (did you mean {close[0]}?)")
                else:
                    hints.append(b)
            message = "unrecognized arguments: " + ", ".join(hints)
        raise UsageError(f"{self.prog}: {message}")


def _add_data_flags(p, need_pred=True):
    p.add_argument("--data", required=True, help="calibration CSV file (header row required)")
    p.add_argument("--y", default="y", help="outcome column name (default: y)")
    if need_pred:
        p.add_argument("--pred", default="f", help="prediction column to calibrate (default: f)")


def _add_loss_flags(p):
    p.add_argument("--loss", choices=["se", "pinball"], default="se", help="loss family")
    p.add_argument("--alpha", type=float, default=0.1, help="pinball miscoverage level")


def _parse_loss(args):
    return SquaredError() if args.loss == "se" else Pinball(args.alpha)


def _load(args, preds):
    roles = ColumnRoles(y=args.y, preds=tuple(preds))
    ds, _ = load_csv(args.data, roles)
    return ds


def _emit(obj, out_path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="venncal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit a point calibrator and emit it as JSON")
    _add_data_flags(p)
    _add_loss_flags(p)
    p.add_argument("--calibrator", choices=["histogram", "isotonic"], default="isotonic")
    p.add_argument("--bins", type=int, default=10, help="histogram bin count")
    p.add_argument("--check", action="store_true", help="include the in-sample calibration report")
    p.add_argument("--out", help="output JSON path (default: stdout)")

    for name in ("venn", "venn-abers"):
        p = sub.add_parser(name, help=f"{name} set calibration at a query prediction")
        _add_data_flags(p)
        _add_loss_flags(p)
        if name == "venn":
            p.add_argument("--calibrator", choices=["histogram", "isotonic"], default="isotonic")
            p.add_argument("--bins", type=int, default=10)
        p.add_argument("--x-pred", type=float, required=True, help="query model prediction f(x)")
        p.add_argument("--y-bins", type=int, default=200, help="imputation grid size")
        p.add_argument("--batch-keys", type=int, default=0,
                       help="if > 0, emit a table over this many prediction keys instead")
        p.add_argument("--csv", help="also write (x_key, imputed_y, prediction) rows to this CSV")
        p.add_argument("--out", help="output JSON path (default: stdout)")

    p = sub.add_parser("multical", help="Venn multicalibration at a query row")
    _add_data_flags(p)
    _add_loss_flags(p)
    p.add_argument("--features", default="", help="comma-separated continuous feature columns")
    p.add_argument("--categoricals", default="", help="comma-separated categorical columns")
    p.add_argument("--x-row", required=True, help="comma-separated query feature values")
    p.add_argument("--x-pred", type=float, required=True)
    p.add_argument("--y-bins", type=int, default=200)
    p.add_argument("--knots", type=int, default=5)
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--mode", choices=["full", "extremes"], default="full")
    p.add_argument("--out", help="output JSON path (default: stdout)")

    p = sub.add_parser("conformal", help="conformal interval for one query point")
    _add_data_flags(p, need_pred=False)
    p.add_argument("--method", choices=["venn", "multical", "marginal", "mondrian"],
                   default="venn")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--mu", default="mu", help="centering predictor column")
    p.add_argument("--quantile", default="score_q_miscal", help="score-quantile model column")
    p.add_argument("--calibrator", choices=["histogram", "isotonic"], default="isotonic")
    p.add_argument("--bins", type=int, default=5, help="histogram / mondrian bin count")
    p.add_argument("--features", default="", help="continuous feature columns (multical)")
    p.add_argument("--categoricals", default="", help="categorical columns (multical)")
    p.add_argument("--knots", type=int, default=5)
    p.add_argument("--x-mu", type=float, required=True, help="mu(x) of the query")
    p.add_argument("--x-quantile-pred", type=float, default=0.0, help="quantile model f(x)")
    p.add_argument("--x-row", default="", help="query feature values (multical)")
    p.add_argument("--y-bins", type=int, default=200)
    p.add_argument("--out", help="output JSON path (default: stdout)")

    p = sub.add_parser("evaluate", help="coverage/width/CCE from a per-point interval CSV")
    p.add_argument("--data", required=True, help="CSV with outcome and interval columns")
    p.add_argument("--y", default="y")
    p.add_argument("--lower", default="lower")
    p.add_argument("--upper", default="upper")
    p.add_argument("--fstar", default="", help="optional threshold-level column for CCE")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out", help="output JSON path (default: stdout)")

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--dgp", choices=["hetero-gauss", "skew-gamma"], default="hetero-gauss")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("run", help="run an experiment described by a JSON config")
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.add_argument("--output-dir", default=None, help="override the config output_dir")
    return parser


def _cmd_calibrate(args) -> int:
    ds = _load(args, [args.pred])
    loss = _parse_loss(args)
    preds = ds.pred(args.pred)
    if args.calibrator == "histogram":
        edges = uniform_mass_bins(preds, BinningConfig(args.bins))
        calib = histogram_calibrate(loss, preds, ds.y, edges)
    else:
        calib = isotonic_calibrate(loss, preds, ds.y)
    payload = calib.to_json_dict()
    if args.check:
        report = check_in_sample_calibration(loss, calib, preds, ds.y)
        payload["in_sample_check"] = {
            "passed": report.passed,
            "levels": [
                {"value": lv.value, "derivative_sum": lv.derivative_sum, "passed": lv.passed}
                for lv in report.levels
            ],
        }
    _emit(payload, args.out)
    return 0


def _cmd_venn(args, isotonic_only: bool) -> int:
    ds = _load(args, [args.pred])
    loss = _parse_loss(args)
    algo = Isotonic() if isotonic_only or args.calibrator == "isotonic" else Histogram(
        BinningConfig(args.bins)
    )
    preds = ds.pred(args.pred)
    grid = ImputationGrid.equal_frequency(ds.y, m=args.y_bins)
    if args.batch_keys > 0:
        key_grid = ImputationGrid.equal_frequency(preds, m=args.batch_keys).values
        table = venn_batch(algo, loss, preds, ds.y, key_grid, grid)
        if args.csv:
            write_csv(args.csv, ["x_key", "imputed_y", "prediction"], table.rows())
        _emit(table.to_json_dict(), args.out)
    else:
        vs = venn_calibrate(algo, loss, preds, ds.y, args.x_pred, grid)
        if args.csv:
            rows = [(vs.x_key, float(a), float(b)) for a, b in vs.entries()]
            write_csv(args.csv, ["x_key", "imputed_y", "prediction"], rows)
        _emit(vs.to_json_dict(), args.out)
    return 0


def _split_names(s: str):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _cmd_multical(args) -> int:
    roles = ColumnRoles(
        y=args.y,
        preds=(args.pred,),
        features=_split_names(args.features),
        categoricals=_split_names(args.categoricals),
    )
    ds, _ = load_csv(args.data, roles)
    loss = _parse_loss(args)
    x_row = np.array([float(v) for v in args.x_row.split(",")])
    grid = ImputationGrid.equal_frequency(ds.y, m=args.y_bins)
    spec = BasisSpec(intercept=not args.no_intercept, num_knots=args.knots)
    vs = venn_multical(loss, ds, args.pred, spec, x_row, args.x_pred, grid, mode=args.mode)
    payload = vs.to_json_dict()
    payload["basis_columns"] = list(build_basis(ds, spec).column_names)
    _emit(payload, args.out)
    return 0


def _cmd_conformal(args) -> int:
    roles = ColumnRoles(
        y=args.y,
        preds=(args.mu, args.quantile),
        features=_split_names(args.features),
        categoricals=_split_names(args.categoricals),
    )
    ds, _ = load_csv(args.data, roles)
    scores = np.abs(ds.y - ds.pred(args.mu))
    qpreds = ds.pred(args.quantile)
    s_max = float(scores.max()) * 1.5 + 1e-9
    y_grid = symmetric_y_grid(args.x_mu, s_max, num=args.y_bins)
    if args.method == "marginal":
        cs = marginal_baseline(scores, args.alpha, args.x_mu)
    elif args.method == "mondrian":
        _, assign = prediction_bin_groups(qpreds, args.bins)
        group = int(assign([args.x_quantile_pred])[0])
        cs = mondrian_baseline(scores, assign(qpreds), args.alpha, group, args.x_mu)
    elif args.method == "venn":
        algo = Isotonic() if args.calibrator == "isotonic" else Histogram(BinningConfig(args.bins))
        cs = venn_cp_interval(qpreds, scores, algo, args.alpha,
                              args.x_quantile_pred, args.x_mu, y_grid)
    else:  # multical
        spec = BasisSpec(intercept=True, num_knots=args.knots)
        design = build_basis(ds, spec)
        if not args.x_row:
            raise UsageError("conformal --method multical requires --x-row")
        x_row = np.array([float(v) for v in args.x_row.split(",")])
        phi_x = design.basis.expand(x_row[None, :])[0]
        cs = multical_cp_interval(design, phi_x, scores, args.alpha, args.x_mu, y_grid)
    _emit(cs.to_json_dict(), args.out)
    return 0


def _cmd_evaluate(args) -> int:
    preds = [args.lower, args.upper] + ([args.fstar] if args.fstar else [])
    roles = ColumnRoles(y=args.y, preds=tuple(preds))
    ds, _ = load_csv(args.data, roles)
    from .conformal import ConformalSet

    sets = [
        ConformalSet(alpha=args.alpha, intervals=((float(a), float(b)),))
        for a, b in zip(ds.pred(args.lower), ds.pred(args.upper))
    ]
    from .metrics import cce as _cce
    from .metrics import coverage_and_width

    cov, width = coverage_and_width(sets, ds.y)
    err = _cce(sets, ds.y, ds.pred(args.fstar), args.alpha) if args.fstar else 0.0
    report = EvalReport(marginal_coverage=cov, avg_width=width, cce=err)
    _emit(report.to_json_dict(), args.out)
    return 0


def _cmd_synth(args) -> int:
    ds, _ = gen_synthetic(make_dgp(args.dgp), args.n, args.seed, alpha=args.alpha)
    header = ["x0", "x1", "y", *ds.pred_columns.keys()]
    rows = [
        (
            float(ds.features[i, 0]),
            int(ds.features[i, 1]),
            float(ds.y[i]),
            *[float(col[i]) for col in ds.pred_columns.values()],
        )
        for i in range(ds.n)
    ]
    write_csv(args.out, header, rows)
    return 0


def _cmd_run(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    config = ExperimentConfig.from_json_dict(raw)
    result = run_experiment(config)
    sys.stdout.write(json.dumps(result.aggregate, indent=2, sort_keys=True) + "\n")
    return 0 if not result.errors or result.reports else 2


def cli(argv=None) -> int:
    """Parse argv and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        if args.command == "venn":
            return _cmd_venn(args, isotonic_only=False)
        if args.command == "venn-abers":
            return _cmd_venn(args, isotonic_only=True)
        if args.command == "multical":
            return _cmd_multical(args)
        if args.command == "conformal":
            return _cmd_conformal(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "run":
            return _cmd_run(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (VennCalError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
