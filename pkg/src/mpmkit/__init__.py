"""Develop, evaluate, validate, update and size multinomial risk prediction models."""

__version__ = "0.1.0"

from .data import CaseMixSummary, Dataset, compare_casemix, describe, load_csv, parse_csv
from .errors import ConvergenceError, DataError, FitError, MPMError, PreconditionError, RankDeficientError, SeparationError
from .fit import FitResult, fit, log_likelihood_gradient_hessian, transform_search
from .metrics import mean_calibration, moderate_calibration_curve, pairwise_c, pdi, weak_calibration, weak_calibration_binary_approx
from .model import MultinomialModel, deserialize, load_model, predicted_probabilities, save_model, serialize
from .samplesize import DevSampleSizeInput, SubmodelInput, dev_sample_size, ext_sample_size
from .validate import external_validate, internal_validate, recalibrate, refit

__all__ = [
    "CaseMixSummary", "ConvergenceError", "DataError", "Dataset", "DevSampleSizeInput", "FitError", "FitResult",
    "MPMError", "MultinomialModel", "PreconditionError", "RankDeficientError", "SeparationError", "SubmodelInput",
    "compare_casemix", "describe", "deserialize", "dev_sample_size", "ext_sample_size", "external_validate", "fit",
    "internal_validate", "load_csv", "load_model", "log_likelihood_gradient_hessian", "mean_calibration",
    "moderate_calibration_curve", "pairwise_c", "parse_csv", "pdi", "predicted_probabilities", "recalibrate",
    "refit", "save_model", "serialize", "transform_search", "weak_calibration", "weak_calibration_binary_approx",
]
