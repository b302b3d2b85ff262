"""Venn and Venn-Abers calibration for generic convex losses.

Set-valued calibration wrapping any in-sample calibrating point algorithm
(histogram binning, generalized isotonic regression), Venn multicalibration
over finite-dimensional function classes, and the conformal prediction
intervals induced by quantile calibration.
"""

from .calibrators import (
    BinningConfig,
    InSampleReport,
    StepCalibrator,
    check_in_sample_calibration,
    histogram_calibrate,
    isotonic_calibrate,
    uniform_mass_bins,
)
from .conformal import (
    ConformalSet,
    GroupingSpec,
    marginal_baseline,
    mondrian_baseline,
    multical_cp_interval,
    venn_cp_interval,
)
from .core import (
    AbsResidual,
    Categorical,
    Continuous,
    Dataset,
    DomainError,
    FitError,
    InvalidInputError,
    Pinball,
    ScorePinball,
    SolverError,
    SquaredError,
    VennCalError,
    WeightedSample,
    loss_derivative,
    loss_subgradient,
    loss_value,
    pool_minimizer,
)
from .metrics import EvalReport, cal_l2_plugin, cce, coverage_and_width
from .multical import (
    BasisSpec,
    DesignMatrix,
    OffsetFit,
    build_basis,
    fit_offset_ls,
    fit_offset_quantile,
    multicalibration_error,
    sm_augment,
    venn_multical,
)
from .venn import (
    Histogram,
    ImputationGrid,
    Isotonic,
    VennSet,
    VennTable,
    oracle_prediction,
    venn_abers,
    venn_batch,
    venn_calibrate,
)

__version__ = "0.1.0"

__all__ = [
    "AbsResidual",
    "BasisSpec",
    "BinningConfig",
    "Categorical",
    "ConformalSet",
    "Continuous",
    "Dataset",
    "DesignMatrix",
    "DomainError",
    "EvalReport",
    "FitError",
    "GroupingSpec",
    "Histogram",
    "ImputationGrid",
    "InSampleReport",
    "InvalidInputError",
    "Isotonic",
    "OffsetFit",
    "Pinball",
    "ScorePinball",
    "SolverError",
    "SquaredError",
    "StepCalibrator",
    "VennCalError",
    "VennSet",
    "VennTable",
    "WeightedSample",
    "build_basis",
    "cal_l2_plugin",
    "cce",
    "check_in_sample_calibration",
    "coverage_and_width",
    "fit_offset_ls",
    "fit_offset_quantile",
    "histogram_calibrate",
    "isotonic_calibrate",
    "loss_derivative",
    "loss_subgradient",
    "loss_value",
    "marginal_baseline",
    "mondrian_baseline",
    "multical_cp_interval",
    "multicalibration_error",
    "oracle_prediction",
    "pool_minimizer",
    "sm_augment",
    "uniform_mass_bins",
    "venn_abers",
    "venn_batch",
    "venn_calibrate",
    "venn_cp_interval",
    "venn_multical",
]
