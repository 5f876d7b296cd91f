"""Minimum sample sizes for developing and externally validating a model.

Development (three criteria, for k outcome categories):

1. expected global shrinkage >= S in every pairwise (one-vs-one)
   logistic submodel;
2. small optimism (``delta``) in the apparent Nagelkerke R^2;
3. precise estimation of every category's overall risk (margin ``delta``).

All intermediates are kept at full precision; only the final per-criterion
sizes are rounded up.

External validation is sized per submodel for three quantities (ln O/E,
calibration slope, c-statistic) and the overall requirement is the
largest of them.  The reference category affects the result because the
submodels are defined against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import PreconditionError

# --------------------------------------------------------------------------
# Development
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DevSampleSizeInput:
    """Inputs for the development calculation.

    ``chisq_divisor`` sets the quantile ``qchisq(1 - alpha/divisor, 1)``
    used by criterion 3 (default 5, whatever the number of categories);
    pass k for a Bonferroni-by-category variant.
    """

    Q: int
    events: tuple[float, ...]
    shrinkage: float = 0.9
    r2_fraction: float = 0.15
    delta: float = 0.05
    alpha: float = 0.05
    chisq_divisor: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(float(e) for e in self.events))
        if self.Q < 1:
            raise PreconditionError("Q (number of predictor parameters) must be >= 1")
        if len(self.events) < 2:
            raise PreconditionError("need event counts for at least 2 categories")
        if any(not (e >= 1) for e in self.events):
            raise PreconditionError("every category needs at least one event (EV_k >= 1)")
        if not 0 < self.shrinkage < 1:
            raise PreconditionError("shrinkage S must lie in (0, 1)")
        if not 0 < self.r2_fraction < 1:
            raise PreconditionError("R2 fraction must lie in (0, 1)")
        if not self.delta > 0:
            raise PreconditionError("delta must be positive")

    @classmethod
    def from_prevalences(cls, Q: int, prevalences: Sequence[float], n: float, **kw) -> "DevSampleSizeInput":
        p = np.asarray(prevalences, dtype=float)
        if np.any(p <= 0) or np.any(p >= 1):
            raise PreconditionError("prevalences must lie strictly between 0 and 1")
        return cls(Q, tuple(p * n), **kw)


@dataclass(frozen=True)
class PairResult:
    k: int
    r: int
    phi: float
    p_pair: float
    r2_adj: float
    m: float
    n: float


@dataclass
class DevSampleSizeResult:
    input: DevSampleSizeInput
    n_total: float
    prevalences: np.ndarray
    max_r2_cs: float
    r2_cs_adj: float
    pairs: list[PairResult]
    criterion1_raw: float
    criterion1_n: int
    criterion2_raw: float
    criterion2_n: int
    nc3: np.ndarray
    criterion3_n: int
    chisq_quantile: float
    final_n: int = field(init=False)
    driving_criterion: int = field(init=False)

    def __post_init__(self):
        ns = [self.criterion1_n, self.criterion2_n, self.criterion3_n]
        self.final_n = max(ns)
        self.driving_criterion = ns.index(self.final_n) + 1

    def pair(self, k: int, r: int) -> PairResult:
        for pr in self.pairs:
            if (pr.k, pr.r) == (k, r):
                return pr
        raise KeyError((k, r))

    def to_dict(self) -> dict:
        inp = self.input
        return {
            "inputs": {
                "Q": inp.Q, "events": list(inp.events), "shrinkage": inp.shrinkage,
                "r2_fraction": inp.r2_fraction, "delta": inp.delta, "alpha": inp.alpha,
                "chisq_divisor": inp.chisq_divisor,
            },
            "n_total": self.n_total,
            "prevalences": self.prevalences.tolist(),
            "max_r2_cs_app": self.max_r2_cs,
            "r2_cs_adj": self.r2_cs_adj,
            "pairs": [
                {"k": p.k, "r": p.r, "phi": p.phi, "p_kr": p.p_pair, "r2_cs_adj_kr": p.r2_adj, "m_kr": p.m, "n_kr": p.n}
                for p in self.pairs
            ],
            "criterion1": {"raw": self.criterion1_raw, "n": self.criterion1_n},
            "criterion2": {"raw": self.criterion2_raw, "n": self.criterion2_n},
            "criterion3": {"nc3": self.nc3.tolist(), "chisq_quantile": self.chisq_quantile, "n": self.criterion3_n},
            "final_n": self.final_n,
            "driving_criterion": self.driving_criterion,
        }

    def format(self) -> str:
        inp = self.input
        K = len(inp.events)
        L = [f"Step 1: number of candidate predictor parameters Q = {inp.Q}", "",
             "Step 2: outcome prevalences and R-squared values"]
        L.append("  " + ", ".join(f"EV{i + 1} = {e:g}" for i, e in enumerate(inp.events)) + f"; n = {self.n_total:g}")
        for i, p in enumerate(self.prevalences):
            L.append(f"  p{i + 1} = EV{i + 1} / n = {p:.4f}")
        for pr in self.pairs:
            L.append(f"  p{pr.k},{pr.r} = (EV{pr.k} + EV{pr.r}) / n = {pr.p_pair:.4f}")
        L.append(f"  max(R2_cs_app) = 1 - (prod p_k^p_k)^2 = {self.max_r2_cs:.4f}")
        L.append(f"  R2_cs_adj = {inp.r2_fraction:g} * max(R2_cs_app) = {self.r2_cs_adj:.4f}")
        for pr in self.pairs:
            L.append(f"  phi{pr.k},{pr.r} = EV{pr.r} / (EV{pr.k} + EV{pr.r}) = {pr.phi:.4f}; "
                     f"R2_cs_adj,{pr.k},{pr.r} = {pr.r2_adj:.4f}")
        L += ["", f"Step 3: Criterion 1 - global shrinkage >= S = {inp.shrinkage:g}"]
        for pr in self.pairs:
            L.append(f"  m{pr.k},{pr.r} = Q / ((S - 1) * log(1 - R2_cs_adj,{pr.k},{pr.r} / S)) = {pr.m:.2f}; "
                     f"n{pr.k},{pr.r} = m / p{pr.k},{pr.r} = {pr.n:.2f}")
        L.append(f"  Criterion 1: n = ceiling({self.criterion1_raw:.2f}) = {self.criterion1_n}")
        L += ["", f"Step 4: Criterion 2 - optimism in Nagelkerke R2 <= {inp.delta:g}",
              f"  NC2 = {self.criterion2_raw:.2f}; n = {self.criterion2_n}"]
        L += ["", f"Step 5: Criterion 3 - precise risk estimates (margin {inp.delta:g}), "
                  f"qchisq(1 - {inp.alpha:g}/{inp.chisq_divisor:g}, 1) = {self.chisq_quantile:.4f}"]
        for i in range(K):
            L.append(f"  NC3,{i + 1} = {self.nc3[i]:.2f}")
        L.append(f"  Criterion 3: n = {self.criterion3_n}")
        L += ["", "Step 6: maximum across criteria",
              f"  Criterion 1: n = {self.criterion1_n}",
              f"  Criterion 2: n = {self.criterion2_n}",
              f"  Criterion 3: n = {self.criterion3_n}",
              f"  final n = {self.final_n} (criterion {self.driving_criterion})"]
        return "\n".join(L)


def _ceil(x: float) -> int:
    # ignore representation error just above an integer
    return int(math.ceil(x - 1e-9 * max(1.0, abs(x))))


def max_cox_snell_r2(prevalences) -> float:
    p = np.asarray(prevalences, dtype=float)
    return float(1.0 - np.prod(p ** p) ** 2)


def dev_sample_size(inp: DevSampleSizeInput) -> DevSampleSizeResult:
    """Minimum development sample size (criteria 1-3) for a multinomial model.

    Raises:
        PreconditionError: a pairwise adjusted R^2 at or above S, or an
            R^2 target outside the domain of the criterion 2 formula.
    """
    ev = np.asarray(inp.events, dtype=float)
    n = float(ev.sum())
    p = ev / n
    if np.any(p <= 0) or np.any(p >= 1):
        raise PreconditionError("degenerate outcome prevalence (0 or 1)")
    S, f, Q = inp.shrinkage, inp.r2_fraction, inp.Q
    max_r2 = max_cox_snell_r2(p)
    r2_adj = f * max_r2

    pairs = []
    for a, b in combinations(range(len(ev)), 2):
        phi = ev[b] / (ev[a] + ev[b])
        r2 = f * (1.0 - (phi ** phi * (1.0 - phi) ** (1.0 - phi)) ** 2)
        if r2 >= S:
            raise PreconditionError(f"R2_cs_adj for pair ({a + 1},{b + 1}) = {r2:.4g} is not below S = {S:g}")
        m = Q / ((S - 1.0) * math.log(1.0 - r2 / S))
        p_pair = (ev[a] + ev[b]) / n
        pairs.append(PairResult(a + 1, b + 1, float(phi), float(p_pair), float(r2), float(m), float(m / p_pair)))
    c1_raw = max(pr.n for pr in pairs)

    arg = 1.0 - r2_adj - inp.delta * max_r2
    if arg <= 0:
        raise PreconditionError("criterion 2 undefined: R2_cs_adj + delta * max(R2_cs_app) >= 1")
    c2_raw = 4.0 * Q / ((r2_adj / (r2_adj + inp.delta * max_r2) - 1.0) * math.log(arg))

    q = float(stats.chi2.ppf(1.0 - inp.alpha / inp.chisq_divisor, 1))
    nc3 = q * p * (1.0 - p) / inp.delta ** 2

    return DevSampleSizeResult(
        inp, n, p, max_r2, r2_adj, pairs,
        c1_raw, _ceil(c1_raw), c2_raw, _ceil(c2_raw), nc3, _ceil(float(nc3.max())), q,
    )


# --------------------------------------------------------------------------
# External validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SubmodelInput:
    """Anticipated values for one submodel (category vs reference)."""

    phi: float
    se_oe: float
    lp_mean: float
    lp_sd: float
    se_slope: float
    c: float
    se_c: float
    name: str = ""

    def __post_init__(self):
        if not 0 < self.phi < 1:
            raise PreconditionError("outcome proportion phi must lie in (0, 1)")
        if not self.lp_sd > 0:
            raise PreconditionError("LP standard deviation must be positive")
        if not 0.5 <= self.c < 1:
            raise PreconditionError("c-statistic must lie in [0.5, 1)")
        if not (self.se_oe > 0 and self.se_slope > 0 and self.se_c > 0):
            raise PreconditionError("target standard errors must be positive")


ROUNDING = ("nearest", "ceil")


def _round(x: float, rounding: str) -> int:
    if rounding == "nearest":
        return int(math.floor(x + 0.5))
    if rounding == "ceil":
        return _ceil(x)
    raise ValueError(f"rounding must be one of {ROUNDING}")


def oe_sample_size_raw(phi: float, se_oe: float) -> float:
    """n solving SE(ln O/E) = sqrt((1 - phi) / (n * phi)) = se_oe."""
    denom = phi * se_oe ** 2
    if denom <= 0 or not math.isfinite(denom):
        raise PreconditionError("phi * SE^2 underflows; target SE too small")
    return (1.0 - phi) / denom


def slope_information(lp_mean: float, lp_sd: float, nodes: int = 64) -> np.ndarray:
    """Unit Fisher information of logistic calibration (intercept 0, slope 1).

    Entries E[w], E[LP w], E[LP^2 w] with w = p(1-p), p = expit(LP),
    LP ~ Normal(lp_mean, lp_sd^2), by Gauss-Hermite quadrature.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    lp = lp_mean + lp_sd * x
    pr = 0.5 * (1.0 + np.tanh(0.5 * lp))
    v = pr * (1.0 - pr)
    i_aa = float(np.sum(w * v))
    i_ab = float(np.sum(w * lp * v))
    i_bb = float(np.sum(w * lp * lp * v))
    return np.array([[i_aa, i_ab], [i_ab, i_bb]])


def slope_sample_size_raw(lp_mean: float, lp_sd: float, se_slope: float, nodes: int = 64) -> float:
    """n at which the calibration slope's SE equals ``se_slope``.

    Checks the quadrature by doubling the node count; a relative change
    above 0.1% raises :class:`PreconditionError`.
    """

    def raw(nn):
        I = slope_information(lp_mean, lp_sd, nn)
        det = I[0, 0] * I[1, 1] - I[0, 1] ** 2
        if not det > 0:
            return math.nan
        return I[0, 0] / (se_slope ** 2 * det)

    a, b = raw(nodes), raw(2 * nodes)
    if not abs(a - b) <= 1e-3 * abs(b):
        raise PreconditionError(f"quadrature did not converge ({nodes} vs {2 * nodes} nodes: {a:.6g} vs {b:.6g})")
    return b


def c_statistic_se(c: float, phi: float, n: float) -> float:
    """Standard error of the c-statistic at sample size n (proportion phi)."""
    s = (1 - c) / (2 - c) + c / (1 + c)
    return math.sqrt(c * (1 - c) * (1 + (n / 2 - 1) * s) / (n ** 2 * phi * (1 - phi)))


def c_statistic_sample_size_raw(c: float, phi: float, se_c: float) -> float:
    """Positive root n of c_statistic_se(c, phi, n) = se_c (a quadratic in n)."""
    s = (1 - c) / (2 - c) + c / (1 + c)
    cc = c * (1 - c)
    t = se_c ** 2 * phi * (1 - phi)
    if t <= 0:
        raise PreconditionError("phi * (1 - phi) * SE^2 underflows; target SE too small")
    b = cc * s / 2
    c0 = cc * (1 - s)
    return (b + math.sqrt(b * b + 4 * t * c0)) / (2 * t)


@dataclass
class SubmodelSampleSize:
    input: SubmodelInput
    oe_raw: float
    slope_raw: float
    c_raw: float
    n_oe: int
    n_slope: int
    n_c: int

    @property
    def n(self) -> int:
        return max(self.n_oe, self.n_slope, self.n_c)


@dataclass
class ExtSampleSizeResult:
    submodels: list[SubmodelSampleSize]
    rounding: str

    @property
    def overall(self) -> int:
        return max(s.n for s in self.submodels)

    @property
    def driver(self) -> tuple[int, str]:
        best = (-1, 0, "")
        for i, s in enumerate(self.submodels):
            for crit, v in (("O/E", s.n_oe), ("calibration slope", s.n_slope), ("c-statistic", s.n_c)):
                if v > best[0]:
                    best = (v, i + 1, crit)
        return best[1], best[2]

    def to_dict(self) -> dict:
        return {
            "rounding": self.rounding,
            "submodels": [
                {
                    "submodel": i + 1,
                    "name": s.input.name,
                    "inputs": {"phi": s.input.phi, "se_oe": s.input.se_oe, "lp_mean": s.input.lp_mean,
                               "lp_sd": s.input.lp_sd, "se_slope": s.input.se_slope, "c": s.input.c,
                               "se_c": s.input.se_c},
                    "oe": {"raw": s.oe_raw, "n": s.n_oe},
                    "calibration_slope": {"raw": s.slope_raw, "n": s.n_slope},
                    "c_statistic": {"raw": s.c_raw, "n": s.n_c},
                    "n": s.n,
                }
                for i, s in enumerate(self.submodels)
            ],
            "overall_n": self.overall,
            "driving_submodel": self.driver[0],
            "driving_criterion": self.driver[1],
        }

    def format(self) -> str:
        L = []
        for i, s in enumerate(self.submodels):
            inp = s.input
            title = f"Submodel {i + 1}" + (f" ({inp.name})" if inp.name else "") + " minimum sample size:"
            L += [title,
                  f"  Observed/Expected (phi = {inp.phi:g}, target SE = {inp.se_oe:g}): n={s.n_oe}",
                  f"  Calibration slope (LP mean [sd] = {inp.lp_mean:g} [{inp.lp_sd:g}], target SE = {inp.se_slope:g}): "
                  f"n={s.n_slope}",
                  f"  Concordance statistic (C = {inp.c:g}, phi = {inp.phi:g}, target SE = {inp.se_c:g}): n={s.n_c}"]
        sub, crit = self.driver
        L.append(f"Minimum sample size (maximum across submodels and criteria): n={self.overall} "
                 f"(submodel {sub}, {crit})")
        return "\n".join(L)


def ext_sample_size(submodels: Sequence[SubmodelInput], rounding: str = "nearest", nodes: int = 64) -> ExtSampleSizeResult:
    """External-validation sample size per submodel and overall.

    ``rounding="nearest"`` rounds each criterion's exact solution to the
    nearest integer; ``"ceil"`` gives the smallest n meeting the target.
    """
    if rounding not in ROUNDING:
        raise ValueError(f"rounding must be one of {ROUNDING}")
    if not submodels:
        raise PreconditionError("need at least one submodel")
    out = []
    for s in submodels:
        oe = oe_sample_size_raw(s.phi, s.se_oe)
        sl = slope_sample_size_raw(s.lp_mean, s.lp_sd, s.se_slope, nodes)
        cs = c_statistic_sample_size_raw(s.c, s.phi, s.se_c)
        out.append(SubmodelSampleSize(s, oe, sl, cs, _round(oe, rounding), _round(sl, rounding), _round(cs, rounding)))
    return ExtSampleSizeResult(out, rounding)
