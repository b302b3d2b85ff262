"""Experiment harness: synthetic data, CSV ingestion, orchestration, CLI plots."""

from .csv_io import CsvFormatError, load_csv, write_csv
from .experiment import ExperimentConfig, run_experiment
from .synth import SyntheticDGP, gen_synthetic, make_dgp

__all__ = [
    "CsvFormatError",
    "load_csv",
    "write_csv",
    "ExperimentConfig",
    "run_experiment",
    "SyntheticDGP",
    "make_dgp",
    "gen_synthetic",
]
