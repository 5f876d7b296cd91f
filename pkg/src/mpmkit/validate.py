"""Internal validation, external validation and model updating."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import CaseMixComparison, CaseMixSummary, Dataset, compare_casemix, describe
from .errors import FitError, PreconditionError
from .fit import fit
from .metrics import (
    CalibrationReport,
    DiscriminationReport,
    _threads,
    bootstrap_indices,
    calibration_report,
    discrimination_report,
    pairwise_c,
    pdi,
    weak_calibration,
)
from .model import MultinomialModel, probabilities_from_lps

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.20


def _align(model: MultinomialModel, d: Dataset) -> Dataset:
    """Predictor columns in model order, outcome coded against model categories."""
    return d.select(model.predictors).recode(model.categories)


def performance(model: MultinomialModel, d: Dataset, slopes: bool = True) -> dict[str, float]:
    """Metrics subject to optimism correction: PDI, pairwise c, calibration slopes."""
    lps = model.linear_predictors(d.X)
    probs = probabilities_from_lps(lps)
    cats = model.categories
    out = {"pdi": pdi(probs, d.y, method="fast")}
    for a, b in itertools.combinations(range(model.k), 2):
        out[f"c[{cats[a]}|{cats[b]}]"] = pairwise_c(probs, d.y, (a, b), "conditional_risk", lps)
    if not slopes:
        return out
    c_slopes = weak_calibration(lps, d.y).c_slopes
    for j in range(model.k - 1):
        out[f"c_slope[{cats[j + 1]}]"] = float(c_slopes[j])
    return out


# --------------------------------------------------------------------------
# Internal validation (bootstrap optimism correction)
# --------------------------------------------------------------------------


@dataclass
class InternalValidationResult:
    names: list[str]
    apparent: np.ndarray
    optimism: np.ndarray
    adjusted: np.ndarray
    B: int
    seed: int
    n_failed: int
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "replicates_failed": self.n_failed,
            "replicates_used": self.B - self.n_failed,
            "metrics": [
                {"metric": nm, "apparent": float(a), "optimism": float(o), "adjusted": float(adj)}
                for nm, a, o, adj in zip(self.names, self.apparent, self.optimism, self.adjusted)
            ],
            "failures": list(self.failures),
        }

    def format(self) -> str:
        lines = [f"Bootstrap optimism correction: B = {self.B}, seed = {self.seed}, failed replicates = {self.n_failed}",
                 f"{'metric':<28}{'apparent':>12}{'optimism':>12}{'adjusted':>12}"]
        for nm, a, o, adj in zip(self.names, self.apparent, self.optimism, self.adjusted):
            lines.append(f"{nm:<28}{a:>12.4f}{o:>12.4f}{adj:>12.4f}")
        return "\n".join(lines)


Resampler = Callable[[np.random.Generator, Dataset], np.ndarray]


def _default_resampler(rng: np.random.Generator, d: Dataset) -> np.ndarray:
    return bootstrap_indices(rng, d.y, d.k)


def internal_validate(d: Dataset, B: int = 200, seed: int = 0, resampler: Resampler | None = None) -> InternalValidationResult:
    """Harrell's bootstrap optimism correction.

    For replicate r (generator ``default_rng(seed + r)``): resample n
    subjects with replacement, refit, and evaluate the refitted model on
    the resample (apparent) and on the original data (test).  Optimism is
    the mean of apparent - test over successful replicates; adjusted =
    apparent-on-original - optimism.

    Replicates whose fit or evaluation fails are dropped and counted; more
    than 20% failures raises :class:`FitError`.  Calibration slopes are
    included only when there are at least as many predictors as submodels.
    """
    if B < 2:
        raise PreconditionError("internal validation needs B >= 2")
    resampler = resampler or _default_resampler
    base = fit(d).model
    # with fewer predictors than submodels the LPs are collinear and
    # calibration slopes are not identifiable; they are then left out
    with_slopes = d.p >= d.k - 1
    apparent_map = performance(base, d, with_slopes)
    names = list(apparent_map)
    apparent = np.array([apparent_map[nm] for nm in names])

    def replicate(r):
        rng = np.random.default_rng(seed + r)
        idx = np.asarray(resampler(rng, d))
        db = d.subset(idx)
        try:
            mb = fit(db).model
            app = performance(mb, db, with_slopes)
            test = performance(mb, d, with_slopes)
        except (FitError, PreconditionError, np.linalg.LinAlgError) as exc:
            return None, f"replicate {r}: {exc}"
        return np.array([app[nm] - test[nm] for nm in names]), None

    nt = _threads()
    if nt > 1:
        with ThreadPoolExecutor(nt) as ex:
            results = list(ex.map(replicate, range(B)))
    else:
        results = [replicate(r) for r in range(B)]

    diffs = [res for res, _ in results if res is not None]
    failures = [msg for _, msg in results if msg is not None]
    if len(failures) > MAX_FAILURE_FRACTION * B:
        raise FitError(
            f"{len(failures)} of {B} bootstrap replicates failed (limit {MAX_FAILURE_FRACTION:.0%}); first: {failures[0]}"
        )
    optimism = np.mean(np.stack(diffs), axis=0)
    return InternalValidationResult(names, apparent, optimism, apparent - optimism, B, seed, len(failures), failures)


# --------------------------------------------------------------------------
# External validation
# --------------------------------------------------------------------------


@dataclass
class ExternalValidationReport:
    n: int
    calibration: CalibrationReport
    discrimination: DiscriminationReport
    casemix: CaseMixComparison | None
    probabilities: np.ndarray
    linear_predictors: np.ndarray

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "calibration": self.calibration.to_dict(),
            "discrimination": self.discrimination.to_dict(),
        }
        if self.casemix is not None:
            out["casemix"] = self.casemix.to_dict()
        return out


def external_validate(
    model: MultinomialModel,
    d_val: Dataset,
    dev_summary: CaseMixSummary | None = None,
    B: int = 0,
    seed: int = 0,
    curves: bool = True,
) -> ExternalValidationReport:
    """Evaluate a frozen model on new data.

    Predictions use the model's coefficients exactly as developed.  The
    validation data may carry extra columns and any category order; every
    model category must be observed and no other label may occur.
    """
    d = _align(model, d_val)
    counts = d.counts()
    if np.any(counts == 0):
        missing = [model.categories[c] for c in np.flatnonzero(counts == 0)]
        raise PreconditionError(f"validation data has no subjects in: {', '.join(missing)}")
    lps = model.linear_predictors(d.X)
    probs = probabilities_from_lps(lps)
    cal = calibration_report(probs, lps, d.y, model.categories, curves=curves)
    disc = discrimination_report(probs, lps, d.y, model.categories, B=B, seed=seed)
    cm = None
    if dev_summary is not None:
        cm = compare_casemix(dev_summary, describe(d.select(list(dev_summary.predictors))))
    return ExternalValidationReport(d.n, cal, disc, cm, probs, lps)


# --------------------------------------------------------------------------
# Updating: recalibration and refitting
# --------------------------------------------------------------------------


def compose_recalibration(model: MultinomialModel, alpha) -> MultinomialModel:
    """Fold recalibration coefficients into the model's coefficients.

    ``alpha`` is (k-1) x k: column 0 holds the recalibration intercepts and
    ``alpha[j, 1 + m]`` multiplies LP_m in equation j.  Then, for every
    predictor i, gamma[j, i] = sum_m alpha[j, 1 + m] * beta[m, i], and the
    intercept additionally gains alpha[j, 0].
    """
    alpha = np.asarray(alpha, dtype=float)
    m = model.k - 1
    if alpha.shape != (m, m + 1):
        raise PreconditionError(f"alpha must be {m} x {m + 1}, got {alpha.shape}")
    gamma = alpha[:, 1:] @ model.coefficients
    gamma[:, 0] += alpha[:, 0]
    return MultinomialModel(model.categories, model.predictors, gamma)


def _quick_eval(model: MultinomialModel, d: Dataset) -> dict:
    lps = model.linear_predictors(d.X)
    probs = probabilities_from_lps(lps)
    cal = calibration_report(probs, lps, d.y, model.categories, curves=False)
    disc = discrimination_report(probs, lps, d.y, model.categories)
    return {"calibration": cal.to_dict(), "discrimination": disc.to_dict()}


@dataclass
class UpdateResult:
    strategy: str
    alpha: np.ndarray | None
    model: MultinomialModel
    source: MultinomialModel
    dataset_fingerprint: str
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)

    @property
    def provenance(self) -> dict:
        return {
            "strategy": self.strategy,
            "source_model_sha256": self.source.sha256(),
            "dataset_fingerprint": self.dataset_fingerprint,
        }

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "alpha": None if self.alpha is None else self.alpha.tolist(),
            "coefficients_before": self.source.coefficients.tolist(),
            "coefficients_after": self.model.coefficients.tolist(),
            "before": self.before,
            "after": self.after,
            "provenance": self.provenance,
        }


def recalibrate(model: MultinomialModel, d_new: Dataset, evaluate: bool = True) -> UpdateResult:
    """Update intercepts and slopes by regressing the outcome on the model's LPs.

    The fitted recalibration coefficients (alpha) are composed with the
    original coefficients (:func:`compose_recalibration`) to give a model
    on the original predictors.
    """
    d = _align(model, d_new)
    lps = model.linear_predictors(d.X)
    weak = weak_calibration(lps, d.y, model.categories)
    alpha = weak.alpha
    updated = compose_recalibration(model, alpha)
    res = UpdateResult("recalibration", alpha, updated, model, d.fingerprint())
    if evaluate:
        res.before = _quick_eval(model, d)
        res.after = _quick_eval(updated, d)
    return res


def refit(model: MultinomialModel, d_new: Dataset, evaluate: bool = True) -> UpdateResult:
    """Re-estimate all coefficients on new data (same predictors and category order)."""
    d = _align(model, d_new)
    updated = fit(d).model
    res = UpdateResult("refit", None, updated, model, d.fingerprint())
    if evaluate:
        res.before = _quick_eval(model, d)
        res.after = _quick_eval(updated, d)
    return res
