"""Restricted mean survival time regression with time-dependent covariates."""

from importlib.metadata import PackageNotFoundError, version

from .core import Dataset, RestrictedView, StepFunction, kaplan_meier, read_csv, restrict, write_csv
from .cox import CoxFit, cox_summary, fit_cox, nagelkerke_r2
from .evaluate import EvalReport, c_index, prediction_error, repeated_evaluation, train_test_split
from .rmst import RmstFit, build_grid, censoring_weights, fit_rmst, fit_rmst_model, predict_rmst
from .stanford import TAU, load_stanford
from .sim import SimConfig, run_coefficient_study, run_prediction_study, true_coefficients

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - source checkout
    __version__ = "0.1.0"

__all__ = [
    "Dataset",
    "RestrictedView",
    "StepFunction",
    "kaplan_meier",
    "read_csv",
    "restrict",
    "write_csv",
    "CoxFit",
    "cox_summary",
    "fit_cox",
    "nagelkerke_r2",
    "EvalReport",
    "c_index",
    "prediction_error",
    "repeated_evaluation",
    "train_test_split",
    "RmstFit",
    "build_grid",
    "censoring_weights",
    "fit_rmst",
    "fit_rmst_model",
    "predict_rmst",
    "SimConfig",
    "run_coefficient_study",
    "run_prediction_study",
    "true_coefficients",
    "TAU",
    "load_stanford",
]
