"""Maximum likelihood fitting of multinomial logistic regression.

The workhorse is :func:`newton_multinomial`, a damped Newton solver for
the multinomial log-likelihood in which every submodel (equation) may
have its own design matrix and a fixed offset.  That covers ordinary
model fitting, the recalibration regressions used for weak calibration
and model updating, the spline smoother for calibration curves, and
binary logistic regression (k = 2).

Step control: full Newton steps, halved until the log-likelihood does
not decrease (beyond floating-point rounding, ``LL_NOISE``).  Convergence
requires a gradient max-norm <= ``tol`` and a relative log-likelihood
change <= ``rel_tol``.  Columns are centred and
scaled internally; reported coefficients are on the original scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConvergenceError, FitError, PreconditionError, RankDeficientError, SeparationError
from .model import MultinomialModel

log = logging.getLogger(__name__)

MAX_ITER = 100
GRAD_TOL = 1e-8
REL_TOL = 1e-12
SEPARATION_BOUND = 15.0
SEPARATION_PROB = 1.0 - 1e-10
# decreases smaller than this (relative) are rounding noise, not a worse fit
LL_NOISE = 1e-13


@dataclass
class NewtonResult:
    coefficients: list[np.ndarray]  # one vector per equation, original scale
    log_likelihood: float
    gradient: np.ndarray
    hessian: np.ndarray
    iterations: int
    converged: bool
    probabilities: np.ndarray
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def observed_information(self) -> np.ndarray:
        return -self.hessian

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.observed_information)

    def standard_errors(self) -> list[np.ndarray]:
        se = np.sqrt(np.clip(np.diag(self.covariance()), 0, None))
        out, start = [], 0
        for b in self.coefficients:
            out.append(se[start:start + b.size])
            start += b.size
        return out


def _as_designs(designs, n_eq: int) -> list[np.ndarray]:
    if isinstance(designs, np.ndarray):
        designs = [designs] * n_eq
    designs = [np.asarray(D, dtype=float) for D in designs]
    if len(designs) != n_eq:
        raise ValueError(f"need {n_eq} design matrices, got {len(designs)}")
    return designs


def _standardize(D: np.ndarray):
    """Return (D_std, shift, scale, const_col) with D_std = (D - shift) / scale."""
    n, q = D.shape
    mean = D.mean(axis=0)
    sd = D.std(axis=0)
    constant = np.all(D == D[0], axis=0) if n else np.ones(q, bool)
    const_cols = np.flatnonzero(constant & (D[0] != 0)) if n else np.array([], int)
    const_col = int(const_cols[0]) if const_cols.size else None
    shift = np.zeros(q)
    scale = np.ones(q)
    for c in range(q):
        if constant[c]:
            scale[c] = abs(D[0, c]) if D[0, c] != 0 else 1.0
            continue
        scale[c] = sd[c]
        if const_col is not None:
            shift[c] = mean[c]
    return (D - shift) / scale, shift, scale, const_col


def _unstandardize(theta: np.ndarray, D: np.ndarray, shift, scale, const_col) -> np.ndarray:
    beta = theta / scale
    if const_col is not None:
        # the constant column (value v) absorbs the centring: v*b_c -= sum shift*b
        beta[const_col] -= np.dot(shift, beta) / D[0, const_col]
    return beta


def _evaluate(designs, offset, y, theta_blocks, want_derivs=True):
    n = y.shape[0]
    n_eq = len(designs)
    eta = np.empty((n, n_eq))
    for j, (D, b) in enumerate(zip(designs, theta_blocks)):
        eta[:, j] = D @ b
    if offset is not None:
        eta += offset
    full = np.concatenate([np.zeros((n, 1)), eta], axis=1)
    shift = full.max(axis=1, keepdims=True)
    e = np.exp(full - shift)
    tot = e.sum(axis=1, keepdims=True)
    P = e / tot
    lse = (shift + np.log(tot))[:, 0]
    ll = float(np.sum(full[np.arange(n), y] - lse))
    if not want_derivs:
        return ll, None, None, P
    Yind = (y[:, None] == np.arange(1, n_eq + 1)[None, :]).astype(float)
    R = Yind - P[:, 1:]
    grad = np.concatenate([D.T @ R[:, j] for j, D in enumerate(designs)])
    sizes = [D.shape[1] for D in designs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    H = np.empty((offs[-1], offs[-1]))
    Pe = P[:, 1:]
    for j in range(n_eq):
        for l in range(j, n_eq):
            w = Pe[:, j] * ((1.0 if j == l else 0.0) - Pe[:, l])
            block = -(designs[j].T * w) @ designs[l]
            H[offs[j]:offs[j + 1], offs[l]:offs[l + 1]] = block
            if l != j:
                H[offs[l]:offs[l + 1], offs[j]:offs[j + 1]] = block.T
    return ll, grad, H, P


def _split(theta: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return np.split(theta, np.cumsum(sizes)[:-1])


def newton_multinomial(
    designs,
    y,
    k: int,
    offset=None,
    *,
    start=None,
    max_iter: int = MAX_ITER,
    tol: float = GRAD_TOL,
    rel_tol: float = REL_TOL,
    separation_bound: float = SEPARATION_BOUND,
) -> NewtonResult:
    """Maximise the multinomial log-likelihood by damped Newton.

    Args:
        designs: one (n, q) matrix shared by all k-1 equations, or a list
            of k-1 matrices.  Intercepts are ordinary constant columns.
        y: outcome codes in ``0..k-1``; 0 is the reference.
        offset: optional (n, k-1) array added to each equation.
        start: optional starting coefficients on the original scale.

    Raises:
        RankDeficientError, SeparationError, ConvergenceError.
    """
    y = np.asarray(y, dtype=np.intp)
    n_eq = k - 1
    designs = _as_designs(designs, n_eq)
    if offset is not None:
        offset = np.asarray(offset, dtype=float).reshape(y.shape[0], n_eq)
    std = [_standardize(D) for D in designs]
    Ds = [s[0] for s in std]
    for j, D in enumerate(Ds):
        if D.shape[1] and np.linalg.matrix_rank(D) < D.shape[1]:
            raise RankDeficientError(f"design for equation {j + 1} is rank deficient (collinear columns)")
    sizes = [D.shape[1] for D in Ds]

    if start is None:
        theta = np.zeros(sum(sizes))
    else:
        # map original-scale start into standardized coordinates
        blocks = []
        for b, (_, shift, scale, cc), D in zip(start, std, designs):
            b = np.asarray(b, dtype=float)
            t = b * scale
            if cc is not None:
                t[cc] = scale[cc] * (b[cc] + np.dot(shift, b) / D[0, cc])
            blocks.append(t)
        theta = np.concatenate(blocks)

    ll, g, H, P = _evaluate(Ds, offset, y, _split(theta, sizes))
    trace = [ll]
    last_rel = math.inf
    converged = False
    it = 0
    while True:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol and (last_rel <= rel_tol or g.size == 0):
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        t = 1.0
        noise = LL_NOISE * max(1.0, abs(ll))
        for _ in range(60):
            cand = theta + t * step
            ll_c, _, _, _ = _evaluate(Ds, offset, y, _split(cand, sizes), want_derivs=False)
            if np.isfinite(ll_c) and ll_c >= ll - noise:
                break
            t *= 0.5
        else:
            if gnorm <= max(tol, 1e3 * np.finfo(float).eps * max(1.0, abs(ll))):
                converged = True
                break
            raise ConvergenceError(
                f"no likelihood-increasing step found (gradient max-norm {gnorm:.3g})", gnorm
            )
        last_rel = abs(ll_c - ll) / max(1.0, abs(ll))
        theta = cand
        ll, g, H, P = _evaluate(Ds, offset, y, _split(theta, sizes))
        trace.append(ll)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol and last_rel <= rel_tol:
            converged = True
            break
        if theta.size and np.max(np.abs(theta)) > separation_bound:
            raise SeparationError(
                f"separation detected: |coefficient| {np.max(np.abs(theta)):.3g} on the standardized "
                f"scale exceeds {separation_bound:g} while the likelihood is still improving"
            )
        if np.max(P[np.arange(y.shape[0]), y]) > SEPARATION_PROB:
            raise SeparationError("separation detected: fitted probability of an observed outcome exceeds 1 - 1e-10")

    if not converged:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (gradient max-norm {gnorm:.3g})", gnorm)

    coefs = [
        _unstandardize(b, D, shift, scale, cc)
        for b, D, (_, shift, scale, cc) in zip(_split(theta, sizes), designs, std)
    ]
    ll_o, g_o, H_o, P_o = _evaluate(designs, offset, y, coefs)
    return NewtonResult(coefs, ll_o, g_o, H_o, it, converged, P_o, trace)


# --------------------------------------------------------------------------
# Public fitting API
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    model: MultinomialModel
    log_likelihood: float
    aic: float
    iterations: int
    converged: bool
    observed_information: np.ndarray
    gradient: np.ndarray
    n: int
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def n_parameters(self) -> int:
        return self.model.coefficients.size

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.observed_information)

    def standard_errors(self) -> np.ndarray:
        """SEs shaped like the coefficient matrix."""
        return np.sqrt(np.clip(np.diag(self.covariance()), 0, None)).reshape(self.model.coefficients.shape)

    def to_dict(self) -> dict:
        m = self.model
        se = self.standard_errors()
        names = ["(Intercept)", *m.predictors]
        return {
            "n": self.n,
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "n_parameters": self.n_parameters,
            "iterations": self.iterations,
            "converged": self.converged,
            "gradient_max_norm": float(np.max(np.abs(self.gradient))),
            "submodels": [
                {
                    "category": m.categories[j + 1],
                    "versus": m.reference,
                    "coefficients": {nm: {"estimate": float(m.coefficients[j, c]), "se": float(se[j, c])}
                                     for c, nm in enumerate(names)},
                }
                for j in range(m.k - 1)
            ],
        }

    def format(self) -> str:
        m = self.model
        se = self.standard_errors()
        lines = [
            f"n = {self.n}, log-likelihood = {self.log_likelihood:.6f}, AIC = {self.aic:.4f}, "
            f"iterations = {self.iterations}, converged = {self.converged}",
        ]
        for j in range(m.k - 1):
            lines.append(f"Submodel {j + 1}: {m.categories[j + 1]} vs {m.reference}")
            for c, nm in enumerate(["(Intercept)", *m.predictors]):
                lines.append(f"  {nm:<20}{m.coefficients[j, c]:>14.6f}  (SE {se[j, c]:.6f})")
        return "\n".join(lines)


def design_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


def check_fittable(d: Dataset) -> None:
    n_par = (d.k - 1) * (d.p + 1)
    if d.n <= n_par:
        raise PreconditionError(f"need n > {n_par} subjects to fit {n_par} parameters, have {d.n}")
    counts = d.counts()
    empty = [d.categories[c] for c in range(d.k) if counts[c] == 0]
    if empty:
        raise PreconditionError(f"no events in outcome category(ies): {', '.join(empty)}")


def fit(d: Dataset, **kwargs) -> FitResult:
    """Maximum likelihood multinomial logistic regression of the outcome on all predictors.

    Raises:
        PreconditionError: too few subjects or an empty category.
        SeparationError, RankDeficientError, ConvergenceError.
    """
    check_fittable(d)
    res = newton_multinomial(design_matrix(d.X), d.y, d.k, **kwargs)
    coef = np.vstack(res.coefficients)
    model = MultinomialModel(d.categories, d.predictors, coef)
    n_par = coef.size
    return FitResult(
        model=model,
        log_likelihood=res.log_likelihood,
        aic=-2.0 * res.log_likelihood + 2.0 * n_par,
        iterations=res.iterations,
        converged=res.converged,
        observed_information=res.observed_information,
        gradient=res.gradient,
        n=d.n,
        loglik_trace=res.loglik_trace,
    )


def log_likelihood(model: MultinomialModel, d: Dataset) -> float:
    d = d.select(model.predictors).recode(model.categories)
    ll, _, _, _ = _evaluate([design_matrix(d.X)] * (model.k - 1), None, d.y, list(model.coefficients), False)
    return ll


def log_likelihood_gradient_hessian(model: MultinomialModel, d: Dataset):
    """Log-likelihood, gradient and Hessian at the model's coefficients.

    Parameters are ordered submodel by submodel (row-major over the
    coefficient matrix).
    """
    d = d.select(model.predictors).recode(model.categories)
    ll, g, H, _ = _evaluate([design_matrix(d.X)] * (model.k - 1), None, d.y, list(model.coefficients))
    return ll, g, H


def fit_binary(design: np.ndarray, y01, offset=None, **kwargs) -> NewtonResult:
    """Binary logistic regression: the k = 2 case of the multinomial solver."""
    y01 = np.asarray(y01, dtype=np.intp)
    if y01.size and (np.all(y01 == 1) or np.all(y01 == 0)):
        raise PreconditionError("binary outcome is constant (all 0 or all 1)")
    off = None if offset is None else np.asarray(offset, dtype=float).reshape(-1, 1)
    return newton_multinomial(design, y01, 2, off, **kwargs)


# --------------------------------------------------------------------------
# Power-transformation search
# --------------------------------------------------------------------------


@dataclass
class Candidate:
    label: str
    columns: tuple[str, ...]
    aic: float | None
    log_likelihood: float | None
    note: str = ""

    @property
    def available(self) -> bool:
        return self.aic is not None


@dataclass
class TransformSearchResult:
    predictor: str
    candidates: list[Candidate]
    selected: str

    def aics(self) -> dict[str, float | None]:
        return {c.label: c.aic for c in self.candidates}

    def to_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "selected": self.selected,
            "candidates": [
                {"formulation": c.label, "aic": c.aic, "log_likelihood": c.log_likelihood, "note": c.note}
                for c in self.candidates
            ],
        }

    def format(self) -> str:
        lines = [f"Transformations of {self.predictor}:"]
        for c in self.candidates:
            aic = f"{c.aic:.4f}" if c.aic is not None else "unavailable"
            mark = "  <- selected" if c.label == self.selected else ""
            note = f"  ({c.note})" if c.note else ""
            lines.append(f"  {c.label:<28}AIC {aic}{note}{mark}")
        return "\n".join(lines)


def transform_search(d: Dataset, predictor: str) -> TransformSearchResult:
    """Compare x, x + ln x, x + x^2 and x + x^3 as the sole predictor terms.

    Each formulation is fitted on its own (no other predictors).  A
    non-linear formulation is selected only if its AIC is strictly lower
    than that of the untransformed fit.  The log candidate is skipped when
    x has non-positive values; failed fits are reported as unavailable.
    """
    x = d.column(predictor)
    specs = [
        (predictor, (predictor,), lambda v: v[:, None]),
        (f"{predictor} + log({predictor})", (predictor, f"log({predictor})"),
         lambda v: np.column_stack([v, np.log(v)])),
        (f"{predictor} + {predictor}^2", (predictor, f"{predictor}^2"), lambda v: np.column_stack([v, v ** 2])),
        (f"{predictor} + {predictor}^3", (predictor, f"{predictor}^3"), lambda v: np.column_stack([v, v ** 3])),
    ]
    cands = []
    for i, (label, cols, build) in enumerate(specs):
        if i == 1 and np.any(x <= 0):
            cands.append(Candidate(label, cols, None, None, "skipped: predictor not strictly positive"))
            continue
        try:
            res = fit(d.with_columns(build(x), cols))
        except (FitError, PreconditionError) as exc:
            log.info("transform candidate %s failed: %s", label, exc)
            cands.append(Candidate(label, cols, None, None, f"fit failed: {exc}"))
            continue
        cands.append(Candidate(label, cols, res.aic, res.log_likelihood))
    base = cands[0]
    selected = base.label
    best = base.aic if base.available else math.inf
    for c in cands[1:]:
        if c.available and c.aic < best:
            best, selected = c.aic, c.label
    return TransformSearchResult(predictor, cands, selected)
