"""Calibration and discrimination of multinomial risk predictions.

Calibration is assessed at three levels:

* mean: observed/expected (O/E) ratio per category;
* weak: calibration intercepts and slopes, from the multinomial
  recalibration framework and from per-category binary approximations;
* moderate: smoothed calibration curves from a flexible (spline)
  multinomial recalibration.

Discrimination is summarised by the polytomous discrimination index (PDI)
and pairwise c-statistics.  Ties count 1/2 in c-statistics and 1/m in an
m-way PDI tie, so identical predictions give c = 0.5 and PDI = 1/k.

Slopes from the multinomial framework are computed for the model's stored
reference category only; they change (slightly) if another reference is
chosen.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import FitError, PreconditionError, RankDeficientError
from .fit import fit_binary, newton_multinomial
from .model import lps_from_probabilities, probabilities_from_lps

MIN_SMOOTHING_N = 50
DEFAULT_KNOTS = (0.05, 0.35, 0.65, 0.95)


def _z(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2))


def _check_outcomes(y, k: int, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (n,):
        raise PreconditionError(f"{y.shape[0]} outcomes for {n} prediction rows")
    if n < 1:
        raise PreconditionError("no subjects")
    return y


def _require_all_observed(y, k: int, categories=None) -> None:
    counts = np.bincount(y, minlength=k)
    if np.any(counts == 0):
        names = categories or [str(c) for c in range(k)]
        missing = [names[c] for c in np.flatnonzero(counts == 0)]
        raise PreconditionError(f"outcome category(ies) never observed: {', '.join(missing)}")


# --------------------------------------------------------------------------
# Level 1: mean calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanCalibration:
    category: str
    observed: int
    expected: float
    prevalence: float
    mean_predicted: float
    oe: float
    oe_ci: tuple[float, float]


def mean_calibration(probs, y, categories: Sequence[str] | None = None, level: float = 0.95) -> list[MeanCalibration]:
    """O/E = observed events / sum of predicted risks, per category.

    The interval is a log-scale normal approximation with
    SE(ln O/E) = sqrt((1 - prevalence) / observed).
    """
    probs = np.asarray(probs, dtype=float)
    n, k = probs.shape
    y = _check_outcomes(y, k, n)
    categories = list(categories) if categories is not None else [str(c) for c in range(k)]
    counts = np.bincount(y, minlength=k)
    expected = probs.sum(axis=0)
    if np.any(expected <= 0):
        raise PreconditionError("zero expected count for a category")
    z = _z(level)
    out = []
    for c in range(k):
        o, e = int(counts[c]), float(expected[c])
        prev = o / n
        oe = o / e
        if o > 0:
            se = math.sqrt((1 - prev) / o)
            ci = (oe * math.exp(-z * se), oe * math.exp(z * se))
        else:
            ci = (math.nan, math.nan)
        out.append(MeanCalibration(categories[c], o, e, prev, e / n, oe, ci))
    return out


# --------------------------------------------------------------------------
# Level 2: weak calibration
# --------------------------------------------------------------------------


@dataclass
class WeakCalibration:
    """Multinomial-framework calibration intercepts and slopes.

    ``slopes[j, m]`` is the coefficient of LP_m in recalibration equation j;
    the diagonal holds the calibration slopes.  ``slope_fit_intercepts``
    are the intercepts of that same (slope) regression, i.e. the alpha_0
    terms used when recalibrating a model.
    """

    intercepts: np.ndarray
    intercept_se: np.ndarray
    slopes: np.ndarray
    slope_se: np.ndarray
    slope_fit_intercepts: np.ndarray
    slope_fit_intercept_se: np.ndarray
    level: float = 0.95

    @property
    def c_slopes(self) -> np.ndarray:
        return np.diag(self.slopes).copy()

    def intercept_ci(self) -> np.ndarray:
        z = _z(self.level)
        return np.column_stack([self.intercepts - z * self.intercept_se, self.intercepts + z * self.intercept_se])

    def slope_ci(self) -> np.ndarray:
        z = _z(self.level)
        return np.stack([self.slopes - z * self.slope_se, self.slopes + z * self.slope_se], axis=-1)

    @property
    def alpha(self) -> np.ndarray:
        """(k-1) x k matrix: recalibration intercept then one slope per LP."""
        return np.column_stack([self.slope_fit_intercepts, self.slopes])


def _check_lps(lps, y):
    lps = np.asarray(lps, dtype=float)
    if lps.ndim != 2:
        raise PreconditionError("linear predictors must be an (n, k-1) array")
    n, m = lps.shape
    y = _check_outcomes(y, m + 1, n)
    if not np.all(np.isfinite(lps)):
        raise PreconditionError("linear predictors must be finite")
    return lps, y


def weak_calibration(lps, y, categories=None, level: float = 0.95) -> WeakCalibration:
    """Calibration intercepts and slope matrix in the multinomial framework.

    Slopes: multinomial regression of the outcome on all k-1 LPs (every
    equation receives every LP).  Intercepts: intercept-only multinomial
    regression with each equation's own LP as an offset.  Standard errors
    come from the observed information.

    Raises:
        PreconditionError: an unobserved category, a zero-variance LP or
            collinear LPs.
        FitError: separation or non-convergence of a recalibration fit.
    """
    lps, y = _check_lps(lps, y)
    n, m = lps.shape
    k = m + 1
    _require_all_observed(y, k, categories)
    flat = [j + 1 for j in range(m) if np.all(lps[:, j] == lps[0, j])]
    if flat:
        raise PreconditionError(f"linear predictor(s) {flat} have zero variance; slopes are not estimable")

    try:
        slope_fit = newton_multinomial(np.column_stack([np.ones(n), lps]), y, k)
    except RankDeficientError:
        raise PreconditionError(
            "the linear predictors are collinear (e.g. fewer predictors than submodels); "
            "the calibration slope matrix is not identifiable"
        ) from None
    B = np.vstack(slope_fit.coefficients)
    Bse = np.vstack(slope_fit.standard_errors())

    int_fit = newton_multinomial(np.ones((n, 1)), y, k, offset=lps)
    a = np.concatenate(int_fit.coefficients)
    ase = np.concatenate(int_fit.standard_errors())
    return WeakCalibration(a, ase, B[:, 1:], Bse[:, 1:], B[:, 0], Bse[:, 0], level)


@dataclass(frozen=True)
class BinaryCalibration:
    category: str
    intercept: float
    intercept_se: float
    slope: float
    slope_se: float
    level: float = 0.95

    def intercept_ci(self) -> tuple[float, float]:
        z = _z(self.level)
        return (self.intercept - z * self.intercept_se, self.intercept + z * self.intercept_se)

    def slope_ci(self) -> tuple[float, float]:
        z = _z(self.level)
        return (self.slope - z * self.slope_se, self.slope + z * self.slope_se)


def weak_calibration_binary_approx(probs, y, category: int, categories=None, level: float = 0.95) -> BinaryCalibration:
    """Calibration intercept/slope for one category treated as binary.

    With s = logit(p_category) and y* = 1{outcome == category}: the slope
    is the coefficient of s in a logistic regression of y* on s, and the
    intercept is estimated with s as a fixed offset.
    """
    probs = np.asarray(probs, dtype=float)
    n, k = probs.shape
    y = _check_outcomes(y, k, n)
    p = probs[:, category]
    if np.any(p <= 0) or np.any(p >= 1):
        raise PreconditionError("predicted risks must lie strictly inside (0, 1)")
    s = np.log(p) - np.log1p(-p)
    y01 = (y == category).astype(np.intp)
    if np.all(s == s[0]):
        raise PreconditionError("predicted risks are constant; slope not estimable")
    slope_fit = fit_binary(np.column_stack([np.ones(n), s]), y01)
    int_fit = fit_binary(np.ones((n, 1)), y01, offset=s)
    name = categories[category] if categories is not None else str(category)
    return BinaryCalibration(
        name,
        float(int_fit.coefficients[0][0]),
        float(int_fit.standard_errors()[0][0]),
        float(slope_fit.coefficients[0][1]),
        float(slope_fit.standard_errors()[0][1]),
        level,
    )


# --------------------------------------------------------------------------
# Level 3: moderate calibration
# --------------------------------------------------------------------------


def rcs_basis(x, knots) -> np.ndarray:
    """Natural (restricted) cubic spline basis: x plus len(knots)-2 columns.

    The basis is linear beyond the boundary knots.  Non-linear columns are
    divided by (t_K - t_1)^2 for conditioning.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    K = t.size
    if K < 3:
        return x[:, None]
    norm = (t[-1] - t[0]) ** 2

    def cube(v):
        return np.clip(v, 0, None) ** 3

    cols = [x]
    for j in range(K - 2):
        c = (
            cube(x - t[j])
            - cube(x - t[K - 2]) * (t[K - 1] - t[j]) / (t[K - 1] - t[K - 2])
            + cube(x - t[K - 1]) * (t[K - 2] - t[j]) / (t[K - 1] - t[K - 2])
        )
        cols.append(c / norm)
    return np.column_stack(cols)


@dataclass
class CalibrationCurve:
    category: str
    predicted: np.ndarray
    observed: np.ndarray
    method: str  # "spline", "linear" or "constant"
    flag: str = ""


def moderate_calibration_curve(
    lps,
    y,
    categories=None,
    knots: Sequence[float] = DEFAULT_KNOTS,
    min_n: int = MIN_SMOOTHING_N,
) -> list[CalibrationCurve]:
    """Smoothed observed risk versus predicted risk, per category.

    Equation j of the flexible recalibration model is a natural cubic
    spline in LP_j (knots at the given LP quantiles).  Each subject
    contributes one (predicted, smoothed observed) point per category,
    sorted by predicted risk.  If the spline fit fails, a linear
    recalibration (intercept + own LP) is used and flagged.
    """
    lps, y = _check_lps(lps, y)
    n, m = lps.shape
    k = m + 1
    if n < min_n:
        raise PreconditionError(
            f"calibration curves need at least {min_n} subjects (have {n}); report mean and weak calibration instead"
        )
    _require_all_observed(y, k, categories)
    names = list(categories) if categories is not None else [str(c) for c in range(k)]
    probs = probabilities_from_lps(lps)

    constant = [bool(np.all(lps[:, j] == lps[0, j])) for j in range(m)]
    if all(constant):
        prev = np.bincount(y, minlength=k) / n
        mean = probs.mean(axis=0)
        return [CalibrationCurve(names[c], np.array([mean[c]]), np.array([prev[c]]), "constant") for c in range(k)]

    def designs(spline: bool):
        out = []
        for j in range(m):
            x = lps[:, j]
            if constant[j]:
                out.append(np.ones((n, 1)))
                continue
            kn = np.quantile(x, knots)
            if spline and np.unique(kn).size == len(knots) and np.unique(x).size > len(knots):
                out.append(np.column_stack([np.ones(n), rcs_basis(x, kn)]))
            else:
                out.append(np.column_stack([np.ones(n), x]))
        return out

    method, flag = "spline", ""
    try:
        smooth = newton_multinomial(designs(True), y, k).probabilities
    except FitError as exc:
        method, flag = "linear", f"spline recalibration failed ({exc}); linear recalibration used"
        smooth = newton_multinomial(designs(False), y, k).probabilities

    curves = []
    for c in range(k):
        order = np.argsort(probs[:, c], kind="stable")
        curves.append(CalibrationCurve(names[c], probs[order, c], smooth[order, c], method, flag))
    return curves


def curves_csv(curves: Sequence[CalibrationCurve]) -> str:
    lines = ["category,predicted,observed_smoothed"]
    for cv in curves:
        cat = cv.category
        if any(ch in cat for ch in ',"\n'):
            cat = '"' + cat.replace('"', '""') + '"'
        lines.extend(f"{cat},{p!r},{o!r}" for p, o in zip(cv.predicted.tolist(), cv.observed.tolist()))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Discrimination
# --------------------------------------------------------------------------


def _pdi_category_scores_fast(probs, y, k):
    groups = [np.flatnonzero(y == c) for c in range(k)]
    scores = []
    for j in range(k):
        v = probs[groups[j], j]
        poly = np.ones((v.size, 1))
        total = float(v.size)
        for c in range(k):
            if c == j:
                continue
            other = np.sort(probs[groups[c], j])
            less = np.searchsorted(other, v, side="left").astype(float)
            eq = np.searchsorted(other, v, side="right") - less
            new = np.zeros((v.size, poly.shape[1] + 1))
            new[:, :-1] += poly * less[:, None]
            new[:, 1:] += poly * eq[:, None]
            poly = new
            total *= other.size
        sums = poly.sum(axis=0)
        scores.append(math.fsum((sums[t] / total) / (t + 1) for t in range(sums.size)))
    return scores


def _pdi_category_scores_enumerate(probs, y, k):
    groups = [np.flatnonzero(y == c) for c in range(k)]
    # ties[j, m-1]: tuples in which category j's subject shares the top risk m ways
    ties = np.zeros((k, k), dtype=np.int64)
    count = 0
    for tup in itertools.product(*groups):
        count += 1
        sub = probs[list(tup)]
        for j in range(k):
            col = sub[:, j]
            top = col.max()
            if col[j] == top:
                ties[j, np.count_nonzero(col == top) - 1] += 1
    return [math.fsum((ties[j, t] / count) / (t + 1) for t in range(k)) for j in range(k)]


def pdi(probs, y, method: str = "auto", categories=None) -> float:
    """Polytomous discrimination index.

    Over every k-tuple holding one subject from each category, category j
    scores 1 when its own subject has the largest predicted risk of j
    (1/m for an m-way tie); PDI averages these scores over tuples and
    categories.  ``method`` is ``"enumerate"`` (all tuples), ``"fast"``
    (sorting) or ``"auto"`` (enumerate when there are at most 20000 tuples).
    Random discrimination gives 1/k, perfect discrimination 1.
    """
    probs = np.asarray(probs, dtype=float)
    n, k = probs.shape
    y = _check_outcomes(y, k, n)
    _require_all_observed(y, k, categories)
    if method == "auto":
        method = "enumerate" if np.prod(np.bincount(y, minlength=k).astype(float)) <= 20000 else "fast"
    if method == "fast":
        scores = _pdi_category_scores_fast(probs, y, k)
    elif method == "enumerate":
        scores = _pdi_category_scores_enumerate(probs, y, k)
    else:
        raise ValueError(f"unknown PDI method {method!r}")
    return math.fsum(scores) / k


def pdi_lower_limit(k: int) -> float:
    return 1.0 / k


def mann_whitney_c(neg_scores, pos_scores) -> float:
    """P(pos > neg) + 0.5 * P(pos == neg) over all (neg, pos) pairs."""
    neg = np.asarray(neg_scores, dtype=float)
    pos = np.asarray(pos_scores, dtype=float)
    if neg.size == 0 or pos.size == 0:
        raise PreconditionError("c-statistic needs at least one subject on each side")
    ranks = stats.rankdata(np.concatenate([neg, pos]))
    u = ranks[neg.size:].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def pairwise_c(probs, y, pair: tuple[int, int], method: str = "conditional_risk", lps=None) -> float:
    """c-statistic between two outcome categories.

    Only subjects in the two categories are used; subjects in ``pair[1]``
    play the role of events.  ``"submodel"`` scores by the LP of the
    submodel for ``pair[1]`` and requires ``pair[0]`` to be the reference
    (code 0).  ``"conditional_risk"`` scores by p_b / (p_a + p_b), ranked
    through the equivalent log ratio LP_b - LP_a.
    """
    a, b = pair
    if a == b:
        raise PreconditionError("pair must name two different categories")
    probs = np.asarray(probs, dtype=float)
    n, k = probs.shape
    y = _check_outcomes(y, k, n)
    lps = lps_from_probabilities(probs) if lps is None else np.asarray(lps, dtype=float)
    full = np.column_stack([np.zeros(n), lps])
    if method == "submodel":
        if a != 0:
            raise PreconditionError("submodel c-statistics exist only for pairs involving the reference category")
        score = full[:, b]
    elif method == "conditional_risk":
        score = full[:, b] - full[:, a]
    else:
        raise ValueError(f"unknown pairwise c method {method!r}")
    neg, pos = score[y == a], score[y == b]
    if neg.size == 0 or pos.size == 0:
        raise PreconditionError(f"pair {pair} has an empty side")
    return mann_whitney_c(neg, pos)


# --------------------------------------------------------------------------
# Bootstrap confidence intervals
# --------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MPMKIT_THREADS", "1")))
    except ValueError:
        return 1


def bootstrap_indices(rng: np.random.Generator, y, k: int, max_attempts: int = 100) -> np.ndarray:
    """Resample subjects with replacement, redrawing until every category appears."""
    n = len(y)
    for _ in range(max_attempts):
        idx = rng.integers(0, n, size=n)
        if np.unique(y[idx]).size == k:
            return idx
    raise PreconditionError(f"no bootstrap resample containing all {k} categories in {max_attempts} attempts")


def bootstrap_ci(
    statistic: Callable[[np.ndarray], float | np.ndarray],
    y,
    k: int,
    B: int,
    seed: int,
    level: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Percentile bootstrap interval for ``statistic(index_array)``.

    Replicate r draws from ``numpy.random.default_rng(seed + r)``, so the
    result is independent of evaluation order and thread count
    (``MPMKIT_THREADS``).  Returns (lower, upper).
    """
    if B < 2:
        raise PreconditionError("bootstrap needs B >= 2")
    y = np.asarray(y, dtype=np.intp)

    def one(r):
        idx = bootstrap_indices(np.random.default_rng(seed + r), y, k)
        return np.asarray(statistic(idx), dtype=float)

    nt = _threads()
    if nt > 1:
        with ThreadPoolExecutor(nt) as ex:
            values = list(ex.map(one, range(B)))
    else:
        values = [one(r) for r in range(B)]
    values = np.stack(values)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(values, [tail, 100 - tail], axis=0)
    return lo, hi


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _ci(ci) -> list:
    return [float(ci[0]), float(ci[1])] if ci is not None else None


@dataclass
class CalibrationReport:
    categories: tuple[str, ...]
    mean: list[MeanCalibration]
    weak: WeakCalibration | None
    binary: list[BinaryCalibration]
    curves: list[CalibrationCurve] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        cats = self.categories
        out = {
            "categories": list(cats),
            "reference": cats[0],
            "mean_calibration": [
                {"category": m.category, "observed": m.observed, "expected": m.expected,
                 "prevalence": m.prevalence, "mean_predicted": m.mean_predicted,
                 "oe": m.oe, "oe_ci": _ci(m.oe_ci)}
                for m in self.mean
            ],
        }
        if self.weak is not None:
            w = self.weak
            ici, sci = w.intercept_ci(), w.slope_ci()
            out["weak_calibration"] = {
                "method": "multinomial",
                "submodels": [
                    {
                        "submodel": j + 1,
                        "category": cats[j + 1],
                        "c_intercept": float(w.intercepts[j]),
                        "c_intercept_se": float(w.intercept_se[j]),
                        "c_intercept_ci": _ci(ici[j]),
                        "c_slope": float(w.slopes[j, j]),
                        "c_slope_se": float(w.slope_se[j, j]),
                        "c_slope_ci": _ci(sci[j, j]),
                    }
                    for j in range(len(cats) - 1)
                ],
                "slope_matrix": w.slopes.tolist(),
                "slope_matrix_se": w.slope_se.tolist(),
                "recalibration_intercepts": w.slope_fit_intercepts.tolist(),
            }
        out["binary_calibration"] = [
            {"category": b.category, "c_intercept": b.intercept, "c_intercept_se": b.intercept_se,
             "c_intercept_ci": _ci(b.intercept_ci()), "c_slope": b.slope, "c_slope_se": b.slope_se,
             "c_slope_ci": _ci(b.slope_ci())}
            for b in self.binary
        ]
        out["moderate_calibration"] = [
            {"category": c.category, "method": c.method, "flag": c.flag, "points": int(c.predicted.size)}
            for c in self.curves
        ]
        out["notes"] = list(self.notes)
        return out


@dataclass
class DiscriminationReport:
    categories: tuple[str, ...]
    pdi: float
    pdi_ci: tuple[float, float] | None
    pairwise: list[dict]

    @property
    def pdi_lower_limit(self) -> float:
        return 1.0 / len(self.categories)

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "pdi": self.pdi,
            "pdi_ci": _ci(self.pdi_ci),
            "pdi_lower_limit": self.pdi_lower_limit,
            "pairwise_c": self.pairwise,
        }


def calibration_report(probs, lps, y, categories, level=0.95, curves=True, knots=DEFAULT_KNOTS) -> CalibrationReport:
    probs = np.asarray(probs, dtype=float)
    notes = []
    mean = mean_calibration(probs, y, categories, level)
    try:
        weak = weak_calibration(lps, y, categories, level)
    except (FitError, PreconditionError) as exc:
        weak = None
        notes.append(f"multinomial weak calibration unavailable: {exc}")
    binary = []
    for c in range(probs.shape[1]):
        try:
            binary.append(weak_calibration_binary_approx(probs, y, c, categories, level))
        except (FitError, PreconditionError) as exc:
            notes.append(f"binary calibration for {categories[c]} unavailable: {exc}")
    cv = moderate_calibration_curve(lps, y, categories, knots) if curves else []
    return CalibrationReport(tuple(categories), mean, weak, binary, cv, notes)


def discrimination_report(probs, lps, y, categories, B: int = 0, seed: int = 0, level=0.95) -> DiscriminationReport:
    """PDI and all pairwise c-statistics, with percentile bootstrap CIs when B >= 2."""
    probs = np.asarray(probs, dtype=float)
    lps = np.asarray(lps, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    k = probs.shape[1]
    pairs = list(itertools.combinations(range(k), 2))

    def stat(idx):
        p, l, yy = probs[idx], lps[idx], y[idx]
        vals = [pdi(p, yy)]
        for a, b in pairs:
            vals.append(pairwise_c(p, yy, (a, b), "conditional_risk", l))
            if a == 0:
                vals.append(pairwise_c(p, yy, (a, b), "submodel", l))
        return np.array(vals)

    point = stat(np.arange(y.size))
    if B >= 2:
        lo, hi = bootstrap_ci(stat, y, k, B, seed, level)
    else:
        lo = hi = None

    def ci(i):
        return None if lo is None else [float(lo[i]), float(hi[i])]

    rows, i = [], 1
    for a, b in pairs:
        row = {"pair": [categories[a], categories[b]], "conditional_risk": float(point[i]), "conditional_risk_ci": ci(i)}
        i += 1
        if a == 0:
            row["submodel"] = float(point[i])
            row["submodel_ci"] = ci(i)
            i += 1
        else:
            row["submodel"] = None
            row["submodel_ci"] = None
        rows.append(row)
    pci = None if lo is None else (float(lo[0]), float(hi[0]))
    return DiscriminationReport(tuple(categories), float(point[0]), pci, rows)
