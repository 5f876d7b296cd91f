"""Fitted multinomial logistic prediction models.

For k outcome categories the model holds k-1 submodels, each comparing
one category with the reference (first) category::

    LP_j = b0_j + b1_j*x1 + ... + bp_j*xp          (j = 1..k-1)
    P(ref)   = 1 / (1 + sum_j exp(LP_j))
    P(cat j) = exp(LP_j) / (1 + sum_j exp(LP_j))
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _jsonio
from .errors import DataError


def probabilities_from_lps(lps) -> np.ndarray:
    """Map linear predictors (..., k-1) to probabilities (..., k).

    Exponentials are shifted by ``max(0, LP_1, ..., LP_{k-1})`` so that
    large linear predictors cannot overflow.
    """
    lps = np.asarray(lps, dtype=float)
    eta = np.concatenate([np.zeros(lps.shape[:-1] + (1,)), lps], axis=-1)
    shift = eta.max(axis=-1, keepdims=True)
    e = np.exp(eta - shift)
    return e / e.sum(axis=-1, keepdims=True)


def lps_from_probabilities(probs, eps: float = 0.0) -> np.ndarray:
    """Inverse of :func:`probabilities_from_lps`: ``LP_j = log(p_j / p_ref)``."""
    probs = np.asarray(probs, dtype=float)
    if eps:
        probs = np.clip(probs, eps, None)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return logp[..., 1:] - logp[..., :1]


@dataclass(frozen=True, eq=False)
class MultinomialModel:
    """Coefficient matrix of shape (k-1, p+1); column 0 holds intercepts."""

    categories: tuple[str, ...]
    predictors: tuple[str, ...]
    coefficients: np.ndarray

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        preds = tuple(str(p) for p in self.predictors)
        coef = np.array(self.coefficients, dtype=float)
        if len(cats) < 2 or len(set(cats)) != len(cats):
            raise DataError("model needs at least 2 distinct categories")
        if len(set(preds)) != len(preds) or any(not p for p in preds):
            raise DataError("predictor names must be unique and non-empty")
        if coef.ndim != 2 or coef.shape != (len(cats) - 1, len(preds) + 1):
            raise DataError(
                f"coefficient matrix must be {len(cats) - 1} x {len(preds) + 1}, got {coef.shape}"
            )
        if not np.all(np.isfinite(coef)):
            raise DataError("coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "predictors", preds)
        object.__setattr__(self, "coefficients", coef)

    @property
    def k(self) -> int:
        return len(self.categories)

    @property
    def p(self) -> int:
        return len(self.predictors)

    @property
    def reference(self) -> str:
        return self.categories[0]

    @property
    def intercepts(self) -> np.ndarray:
        return self.coefficients[:, 0]

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[:, 1:]

    def __eq__(self, other):
        if not isinstance(other, MultinomialModel):
            return NotImplemented
        return (
            self.categories == other.categories
            and self.predictors == other.predictors
            and np.array_equal(self.coefficients, other.coefficients)
        )

    __hash__ = None

    def _check_rows(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.ndim != 2 or X2.shape[1] != self.p:
            raise DataError(f"expected {self.p} predictor values per row, got shape {X.shape}")
        if not np.all(np.isfinite(X2)):
            raise DataError("predictor values must be finite")
        return X2

    def linear_predictors(self, X) -> np.ndarray:
        """LPs for one row (p,) -> (k-1,) or many rows (n, p) -> (n, k-1)."""
        X2 = self._check_rows(X)
        lps = self.intercepts + X2 @ self.slopes.T
        return lps[0] if np.ndim(X) == 1 else lps

    def predict_proba(self, X) -> np.ndarray:
        """Risk vector(s) ordered as ``categories``."""
        return probabilities_from_lps(self.linear_predictors(X))

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "reference": self.reference,
            "predictors": list(self.predictors),
            "coefficients": [[float(v) for v in row] for row in self.coefficients],
        }

    def sha256(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def linear_predictors(m: MultinomialModel, row) -> np.ndarray:
    return m.linear_predictors(row)


def predicted_probabilities(m: MultinomialModel, row) -> np.ndarray:
    return m.predict_proba(row)


def serialize(m: MultinomialModel, provenance: dict | None = None) -> str:
    """Model JSON document; coefficients written with 17 significant digits."""
    doc = m.to_dict()
    if provenance is not None:
        doc["provenance"] = provenance
    return _jsonio.dumps(doc, digits=17)


def deserialize(doc) -> MultinomialModel:
    """Build a model from a JSON string or an already-parsed mapping."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise DataError(f"model document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError("model document must be a JSON object")
    for key in ("categories", "reference", "predictors", "coefficients"):
        if key not in doc:
            raise DataError(f"model document lacks {key!r}")
    cats, preds, coef = doc["categories"], doc["predictors"], doc["coefficients"]
    if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
        raise DataError("'categories' must be a list of strings")
    if not isinstance(preds, list) or not all(isinstance(p, str) for p in preds):
        raise DataError("'predictors' must be a list of strings")
    if not cats or doc["reference"] != cats[0]:
        raise DataError("'reference' must equal the first category")
    if not isinstance(coef, list) or len(coef) != len(cats) - 1:
        raise DataError(f"'coefficients' must have {len(cats) - 1} rows")
    for j, row in enumerate(coef):
        if not isinstance(row, list) or len(row) != len(preds) + 1:
            raise DataError(f"coefficient row {j} must have {len(preds) + 1} entries")
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DataError(f"coefficient row {j} contains a non-finite or non-numeric value: {v!r}")
    return MultinomialModel(tuple(cats), tuple(preds), np.array(coef, dtype=float).reshape(len(cats) - 1, len(preds) + 1))


def save_model(m: MultinomialModel, path, provenance: dict | None = None) -> None:
    Path(path).write_text(serialize(m, provenance), encoding="utf-8")


def load_model(path) -> MultinomialModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such model file: {path}")
    return deserialize(path.read_text(encoding="utf-8"))


def predictions_csv(m: MultinomialModel, X: np.ndarray) -> str:
    """One row per subject, one column per category (header = labels)."""
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(m.categories)
    for row in m.predict_proba(X):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def make_model(categories: Sequence[str], predictors: Sequence[str], coefficients) -> MultinomialModel:
    return MultinomialModel(tuple(categories), tuple(predictors), np.asarray(coefficients, dtype=float))
