"""Datasets: CSV loading, case-mix description and comparison.

A :class:`Dataset` is a rectangular table of numeric predictors plus one
categorical outcome.  Outcome labels are stored as integer codes into
``categories``; the first category is the reference.

Categorical predictors must already be encoded as numeric (e.g. 0/1)
columns.  Missing values are rejected at load time; impute beforehand.

Quantiles use linear interpolation between order statistics (the
"type 7" rule, ``numpy.percentile``'s default).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric predictors ``X`` (n x p) and outcome codes ``y`` (n,).

    ``y[i]`` indexes into ``categories``; ``categories[0]`` is the reference.
    """

    X: np.ndarray
    y: np.ndarray
    predictors: tuple[str, ...]
    categories: tuple[str, ...]
    outcome_name: str = "outcome"

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1 and len(self.predictors) == 0:
            X = X.reshape(-1, 0)
        y = np.asarray(self.y, dtype=np.intp).copy()
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"inconsistent shapes X{X.shape} y{y.shape}")
        if X.shape[1] != len(self.predictors):
            raise DataError(f"{X.shape[1]} columns but {len(self.predictors)} predictor names")
        if len(set(self.predictors)) != len(self.predictors) or any(not p for p in self.predictors):
            raise DataError("predictor names must be unique and non-empty")
        if len(self.categories) < 2:
            raise DataError("outcome needs at least 2 categories")
        if len(set(self.categories)) != len(self.categories):
            raise DataError("duplicate outcome categories")
        if y.shape[0] < 1:
            raise DataError("dataset has no subjects")
        if np.any(y < 0) or np.any(y >= len(self.categories)):
            raise DataError("outcome code out of range")
        if not np.all(np.isfinite(X)):
            raise DataError("predictor values must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "predictors", tuple(self.predictors))
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def k(self) -> int:
        return len(self.categories)

    @property
    def p(self) -> int:
        return len(self.predictors)

    @property
    def reference(self) -> str:
        return self.categories[0]

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.k)

    def labels(self) -> list[str]:
        return [self.categories[c] for c in self.y]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.X[index], self.y[index], self.predictors, self.categories, self.outcome_name)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.predictors.index(name)]
        except ValueError:
            raise DataError(f"no predictor column {name!r}") from None

    def select(self, predictors: Sequence[str]) -> "Dataset":
        """Reorder/restrict predictor columns by name."""
        missing = [p for p in predictors if p not in self.predictors]
        if missing:
            raise DataError(f"dataset lacks predictor column(s): {', '.join(missing)}")
        cols = [self.predictors.index(p) for p in predictors]
        return Dataset(self.X[:, cols], self.y, tuple(predictors), self.categories, self.outcome_name)

    def recode(self, categories: Sequence[str]) -> "Dataset":
        """Re-express outcome codes against another category order.

        ``categories`` must contain every label present in this dataset.
        """
        categories = tuple(categories)
        unknown = [c for c in self.categories if c not in categories and np.any(self.y == self.categories.index(c))]
        if unknown:
            raise DataError(f"unknown outcome label(s): {', '.join(unknown)}")
        mapping = np.array([categories.index(c) if c in categories else -1 for c in self.categories])
        return Dataset(self.X, mapping[self.y], self.predictors, categories, self.outcome_name)

    def with_columns(self, X: np.ndarray, predictors: Sequence[str]) -> "Dataset":
        return Dataset(X, self.y, tuple(predictors), self.categories, self.outcome_name)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.predictors == other.predictors
            and self.categories == other.categories
            and self.outcome_name == other.outcome_name
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update("\x1f".join(self.predictors).encode())
        h.update(b"\x1e")
        h.update("\x1f".join(self.categories).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y.astype(np.int64)).tobytes())
        return h.hexdigest()


def _parse_number(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def _listing(items: list[str], limit: int = 10) -> str:
    text = "; ".join(items[:limit])
    if len(items) > limit:
        text += f"; ... ({len(items) - limit} more)"
    return text


def parse_csv(text: str, outcome_column: str, reference_category: str) -> Dataset:
    """Parse CSV text; see :func:`load_csv`."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("CSV file is empty (no header row)") from None
    if outcome_column not in header:
        raise DataError(f"outcome column {outcome_column!r} not among headers {header}")
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    out_idx = header.index(outcome_column)
    pred_idx = [i for i in range(len(header)) if i != out_idx]
    predictors = tuple(header[i] for i in pred_idx)

    rows: list[list[float]] = []
    labels: list[str] = []
    missing: list[str] = []
    bad: list[str] = []
    for rowno, raw in enumerate(reader, start=1):
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            raise DataError(f"row {rowno}: expected {len(header)} fields, found {len(raw)}")
        cells = [c.strip() for c in raw]
        values = []
        for i in pred_idx:
            if cells[i] == "":
                missing.append(f"row {rowno}, column {header[i]!r}")
                continue
            try:
                values.append(_parse_number(cells[i]))
            except ValueError:
                bad.append(f"row {rowno}, column {header[i]!r}: {cells[i]!r}")
        if cells[out_idx] == "":
            missing.append(f"row {rowno}, column {outcome_column!r}")
        rows.append(values)
        labels.append(cells[out_idx])
    if missing:
        raise DataError("missing values (impute before loading) at: " + _listing(missing))
    if bad:
        raise DataError("non-numeric predictor values at: " + _listing(bad))
    if not labels:
        raise DataError("CSV file has no data rows")
    if reference_category not in labels:
        raise DataError(f"reference category {reference_category!r} does not occur in column {outcome_column!r}")

    categories = [reference_category]
    for lab in labels:
        if lab not in categories:
            categories.append(lab)
    if len(categories) < 2:
        raise DataError(f"outcome column {outcome_column!r} has fewer than 2 categories")
    code = {c: i for i, c in enumerate(categories)}
    X = np.array(rows, dtype=float).reshape(len(labels), len(predictors))
    y = np.array([code[lab] for lab in labels], dtype=np.intp)
    return Dataset(X, y, predictors, tuple(categories), outcome_column)


def load_csv(path, outcome_column: str, reference_category: str) -> Dataset:
    """Load a dataset from a UTF-8 CSV file with a header row.

    Every column other than ``outcome_column`` is parsed as a numeric
    predictor.  Categories are ordered reference first, then in order of
    first appearance.

    Raises:
        DataError: missing file, missing/empty cells (listing row and
            column), non-numeric predictor cells, absent reference label,
            or fewer than two outcome categories.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    return parse_csv(path.read_text(encoding="utf-8"), outcome_column, reference_category)


def to_csv(d: Dataset, path=None) -> str:
    """Write ``d`` as CSV (predictors first, outcome last); returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*d.predictors, d.outcome_name])
    for row, code in zip(d.X, d.y):
        w.writerow([repr(float(v)) for v in row] + [d.categories[code]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


@dataclass(frozen=True)
class PredictorSummary:
    median: float
    q1: float
    q3: float
    mean: float
    sd: float


@dataclass(frozen=True)
class CaseMixSummary:
    n: int
    predictors: dict[str, PredictorSummary]
    categories: tuple[str, ...]
    counts: tuple[int, ...]
    prevalences: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "predictors": {
                name: {"median": s.median, "q1": s.q1, "q3": s.q3, "mean": s.mean, "sd": s.sd}
                for name, s in self.predictors.items()
            },
            "categories": list(self.categories),
            "counts": list(self.counts),
            "prevalences": list(self.prevalences),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CaseMixSummary":
        try:
            preds = {name: PredictorSummary(**{k: float(v) for k, v in s.items()}) for name, s in doc["predictors"].items()}
            counts = tuple(int(c) for c in doc["counts"])
            n = int(doc.get("n", sum(counts)))
            prev = tuple(float(p) for p in doc.get("prevalences", [c / n for c in counts]))
            return cls(n, preds, tuple(doc["categories"]), counts, prev)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed case-mix summary: {exc}") from None


def describe(d: Dataset) -> CaseMixSummary:
    """Median, IQR, mean and SD per predictor; count and prevalence per category."""
    preds = {}
    for j, name in enumerate(d.predictors):
        col = d.X[:, j]
        q1, med, q3 = np.percentile(col, [25, 50, 75])
        # exactly rounded sums keep the summary independent of row order
        mean = math.fsum(col) / d.n
        sd = math.sqrt(math.fsum((col - mean) ** 2) / (d.n - 1)) if d.n > 1 else 0.0
        preds[name] = PredictorSummary(float(med), float(q1), float(q3), mean, sd)
    counts = d.counts()
    prev = counts / counts.sum()
    return CaseMixSummary(d.n, preds, d.categories, tuple(int(c) for c in counts), tuple(float(p) for p in prev))


@dataclass(frozen=True)
class CaseMixComparison:
    predictors: dict[str, dict[str, float]]
    categories: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"predictors": self.predictors, "categories": self.categories}

    def format(self) -> str:
        lines = [f"{'predictor':<16}{'dev median [IQR]':>26}{'val median [IQR]':>26}{'diff':>9}"]
        for name, r in self.predictors.items():
            dev = f"{r['dev_median']:.3g} [{r['dev_q1']:.3g}-{r['dev_q3']:.3g}]"
            val = f"{r['val_median']:.3g} [{r['val_q1']:.3g}-{r['val_q3']:.3g}]"
            lines.append(f"{name:<16}{dev:>26}{val:>26}{r['median_difference']:>+9.3g}")
        lines.append(f"{'category':<16}{'dev n (%)':>18}{'val n (%)':>18}{'ratio val/dev':>15}")
        for name, r in self.categories.items():
            dev = f"{r['dev_count']:.0f} ({100 * r['dev_prevalence']:.0f}%)"
            val = f"{r['val_count']:.0f} ({100 * r['val_prevalence']:.0f}%)"
            lines.append(f"{name:<16}{dev:>18}{val:>18}{r['prevalence_ratio']:>15.3f}")
        return "\n".join(lines)


def compare_casemix(dev: CaseMixSummary, val: CaseMixSummary) -> CaseMixComparison:
    """Side-by-side development vs validation case-mix.

    Reports median differences (val - dev) and prevalence ratios (val/dev).
    """
    if set(dev.predictors) != set(val.predictors):
        raise DataError(f"predictor sets differ: {sorted(dev.predictors)} vs {sorted(val.predictors)}")
    if set(dev.categories) != set(val.categories):
        raise DataError(f"category sets differ: {list(dev.categories)} vs {list(val.categories)}")
    preds = {}
    for name, a in dev.predictors.items():
        b = val.predictors[name]
        preds[name] = {
            "dev_median": a.median, "dev_q1": a.q1, "dev_q3": a.q3, "dev_mean": a.mean, "dev_sd": a.sd,
            "val_median": b.median, "val_q1": b.q1, "val_q3": b.q3, "val_mean": b.mean, "val_sd": b.sd,
            "median_difference": b.median - a.median,
        }
    cats = {}
    for i, name in enumerate(dev.categories):
        j = val.categories.index(name)
        pd_, pv = dev.prevalences[i], val.prevalences[j]
        cats[name] = {
            "dev_count": dev.counts[i], "dev_prevalence": pd_,
            "val_count": val.counts[j], "val_prevalence": pv,
            "prevalence_ratio": pv / pd_ if pd_ > 0 else math.inf,
        }
    return CaseMixComparison(preds, cats)
