"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 precondition
refusal.  Every command that writes files takes ``--out DIR`` and refuses
to replace existing files unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, _jsonio
from .data import CaseMixSummary, describe, load_csv
from .errors import DataError, FitError, PreconditionError
from .fit import fit, transform_search
from .metrics import curves_csv
from .model import load_model, serialize
from .samplesize import DevSampleSizeInput, SubmodelInput, dev_sample_size, ext_sample_size
from .validate import external_validate, internal_validate, recalibrate, refit

log = logging.getLogger("mpmkit")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PRECONDITION = 0, 2, 3, 4


class OutputExists(Exception):
    pass


def _write_outputs(out: str | None, files: dict[str, str], force: bool) -> None:
    """Write all files or none: collisions are checked before anything is written."""
    if out is None:
        return
    d = Path(out)
    if d.exists() and not d.is_dir():
        raise OutputExists(f"output path {d} exists and is not a directory")
    clash = [name for name in files if (d / name).exists()]
    if clash and not force:
        raise OutputExists(f"refusing to overwrite {', '.join(str(d / c) for c in clash)} (use --force)")
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text, encoding="utf-8")


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_fit(a) -> int:
    d = load_csv(a.csv, a.outcome, a.reference)
    res = fit(d)
    files = {
        "model.json": serialize(res.model),
        "fit.json": _jsonio.dumps(res.to_dict()),
        "casemix.json": _jsonio.dumps(describe(d).to_dict()),
    }
    text = [res.format()]
    if a.transform_search is not None:
        names = a.transform_search or list(d.predictors)
        results = [transform_search(d, nm) for nm in names]
        files["transform_search.json"] = _jsonio.dumps([r.to_dict() for r in results])
        text += [r.format() for r in results]
    report = "\n\n".join(text) + "\n"
    files["fit.txt"] = report
    _write_outputs(a.out, files, a.force)
    _emit(report)
    return EXIT_OK


def _format_evaluation(rep) -> str:
    cal, disc = rep.calibration.to_dict(), rep.discrimination.to_dict()
    L = [f"n = {rep.n}", "", "Mean calibration (O/E):"]
    for m in cal["mean_calibration"]:
        ci = m["oe_ci"]
        L.append(f"  {m['category']:<16}O/E = {m['oe']:.3f} [{ci[0]:.3f}, {ci[1]:.3f}]  "
                 f"(observed {m['prevalence']:.3f}, mean predicted {m['mean_predicted']:.3f})")
    if "weak_calibration" in cal:
        L.append("Weak calibration (multinomial framework):")
        for s in cal["weak_calibration"]["submodels"]:
            ic, sc = s["c_intercept_ci"], s["c_slope_ci"]
            L.append(f"  {s['category']:<16}c-intercept = {s['c_intercept']:.3f} [{ic[0]:.3f}, {ic[1]:.3f}]  "
                     f"c-slope = {s['c_slope']:.3f} [{sc[0]:.3f}, {sc[1]:.3f}]")
    L.append("Weak calibration (per-category binary approximation):")
    for b in cal["binary_calibration"]:
        L.append(f"  {b['category']:<16}c-intercept = {b['c_intercept']:.3f}  c-slope = {b['c_slope']:.3f}")
    for note in cal["notes"]:
        L.append(f"  note: {note}")

    def ci(c):
        return "" if c is None else f" [{c[0]:.3f}, {c[1]:.3f}]"

    L += ["", f"PDI = {disc['pdi']:.3f}{ci(disc['pdi_ci'])} (lower limit {disc['pdi_lower_limit']:.3f})",
          "Pairwise c-statistics:"]
    for r in disc["pairwise_c"]:
        line = f"  {r['pair'][0]} vs {r['pair'][1]}: conditional risk {r['conditional_risk']:.3f}{ci(r['conditional_risk_ci'])}"
        if r["submodel"] is not None:
            line += f"; submodel {r['submodel']:.3f}{ci(r['submodel_ci'])}"
        L.append(line)
    if rep.casemix is not None:
        L += ["", "Case-mix (development vs validation):", rep.casemix.format()]
    return "\n".join(L) + "\n"


def _evaluate(a, dev_summary=None) -> int:
    model = load_model(a.model)
    d = load_csv(a.csv, a.outcome, model.reference)
    rep = external_validate(model, d, dev_summary=dev_summary, B=a.B, seed=a.seed, curves=not a.no_curves)
    header = f"bootstrap B = {a.B}, seed = {a.seed}\n"
    text = header + _format_evaluation(rep)
    files = {
        "calibration.json": _jsonio.dumps(rep.calibration.to_dict()),
        "discrimination.json": _jsonio.dumps(rep.discrimination.to_dict()),
        "report.txt": text,
    }
    if rep.calibration.curves:
        files["curves.csv"] = curves_csv(rep.calibration.curves)
    if rep.casemix is not None:
        files["casemix_comparison.json"] = _jsonio.dumps(rep.casemix.to_dict())
    _write_outputs(a.out, files, a.force)
    _emit(text)
    return EXIT_OK


def cmd_evaluate(a) -> int:
    return _evaluate(a)


def cmd_validate_external(a) -> int:
    dev = None
    if a.dev_summary:
        dev = CaseMixSummary.from_dict(_read_json(a.dev_summary))
    return _evaluate(a, dev)


def cmd_validate_internal(a) -> int:
    d = load_csv(a.csv, a.outcome, a.reference)
    res = internal_validate(d, B=a.B, seed=a.seed)
    text = res.format() + "\n"
    _write_outputs(a.out, {"internal_validation.json": _jsonio.dumps(res.to_dict()), "report.txt": text}, a.force)
    _emit(text)
    return EXIT_OK


def cmd_update(a) -> int:
    model = load_model(a.model)
    d = load_csv(a.csv, a.outcome, model.reference)
    res = recalibrate(model, d) if a.strategy == "recalibrate" else refit(model, d)
    diff = _update_diff(res)
    files = {
        "model.json": serialize(res.model, res.provenance),
        "update.json": _jsonio.dumps(res.to_dict()),
        "report.txt": diff,
    }
    _write_outputs(a.out, files, a.force)
    _emit(diff)
    return EXIT_OK


def _update_diff(res) -> str:
    m0, m1 = res.source, res.model
    L = [f"strategy = {res.strategy}", "Coefficients (before -> after):"]
    for j in range(m0.k - 1):
        L.append(f"  Submodel {j + 1}: {m0.categories[j + 1]} vs {m0.reference}")
        for c, nm in enumerate(["(Intercept)", *m0.predictors]):
            L.append(f"    {nm:<20}{m0.coefficients[j, c]:>12.5f} -> {m1.coefficients[j, c]:>12.5f}")
    if res.before:
        L.append("Performance on the update data (before -> after):")
        b, f = res.before, res.after
        for x, y in zip(b["calibration"]["mean_calibration"], f["calibration"]["mean_calibration"]):
            L.append(f"  O/E {x['category']:<16}{x['oe']:>8.3f} -> {y['oe']:.3f}")
        if "weak_calibration" in b["calibration"] and "weak_calibration" in f["calibration"]:
            for x, y in zip(b["calibration"]["weak_calibration"]["submodels"],
                            f["calibration"]["weak_calibration"]["submodels"]):
                L.append(f"  c-intercept {x['category']:<8}{x['c_intercept']:>8.3f} -> {y['c_intercept']:.3f}")
                L.append(f"  c-slope {x['category']:<12}{x['c_slope']:>8.3f} -> {y['c_slope']:.3f}")
        L.append(f"  PDI{'':<17}{b['discrimination']['pdi']:>8.3f} -> {f['discrimination']['pdi']:.3f}")
    return "\n".join(L) + "\n"


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p} is not valid JSON: {exc}") from None


_DEV_KEYS = ("shrinkage", "r2_fraction", "delta", "alpha", "chisq_divisor")


def cmd_samplesize_dev(a) -> int:
    if a.json:
        doc = _read_json(a.json)
        kw = {k: float(doc[k]) for k in _DEV_KEYS if k in doc}
        try:
            if "events" in doc:
                inp = DevSampleSizeInput(int(doc["Q"]), tuple(doc["events"]), **kw)
            else:
                inp = DevSampleSizeInput.from_prevalences(int(doc["Q"]), doc["prevalences"], float(doc["n"]), **kw)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed sample-size input: {exc}") from None
    else:
        if a.Q is None:
            raise DataError("--Q is required (or give --json)")
        kw = {k: getattr(a, k) for k in _DEV_KEYS}
        if a.events:
            inp = DevSampleSizeInput(a.Q, tuple(a.events), **kw)
        elif a.prevalences and a.n:
            inp = DevSampleSizeInput.from_prevalences(a.Q, a.prevalences, a.n, **kw)
        else:
            raise DataError("give --events, or --prevalences with --n")
    res = dev_sample_size(inp)
    text = res.format() + "\n"
    _write_outputs(a.out, {"samplesize_dev.txt": text, "samplesize_dev.json": _jsonio.dumps(res.to_dict())}, a.force)
    _emit(text)
    if a.print_json:
        _emit(_jsonio.dumps(res.to_dict()))
    return EXIT_OK


_VAL_FIELDS = ("phi", "se_oe", "lp_mean", "lp_sd", "se_slope", "c", "se_c")


def cmd_samplesize_val(a) -> int:
    rounding = a.rounding
    if a.json:
        doc = _read_json(a.json)
        rounding = doc.get("rounding", rounding)
        try:
            subs = [SubmodelInput(**{f: float(s[f]) for f in _VAL_FIELDS}, name=str(s.get("name", "")))
                    for s in doc["submodels"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed sample-size input: {exc}") from None
    else:
        cols = {f: getattr(a, f) for f in _VAL_FIELDS}
        missing = [f"--{f.replace('_', '-')}" for f, v in cols.items() if not v]
        if missing:
            raise DataError(f"missing {', '.join(missing)} (or give --json)")
        lens = {len(v) for v in cols.values()}
        if len(lens) != 1:
            raise DataError("give the same number of values (one per submodel) for every flag")
        subs = [SubmodelInput(**{f: cols[f][i] for f in _VAL_FIELDS}) for i in range(lens.pop())]
    if rounding not in ("nearest", "ceil"):
        raise DataError(f"unknown rounding {rounding!r}")
    res = ext_sample_size(subs, rounding=rounding)
    text = res.format() + "\n"
    _write_outputs(a.out, {"samplesize_val.txt": text, "samplesize_val.json": _jsonio.dumps(res.to_dict())}, a.force)
    _emit(text)
    if a.print_json:
        _emit(_jsonio.dumps(res.to_dict()))
    return EXIT_OK


# --------------------------------------------------------------------------
# SVG calibration plot
# --------------------------------------------------------------------------

PANEL, MARGIN = 300, 40


def read_curves(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such curve file: {p}")
    curves: dict[str, list] = {}
    with p.open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["category", "predicted", "observed_smoothed"]:
            raise DataError(f"{p}: expected header category,predicted,observed_smoothed")
        for i, row in enumerate(rows, start=2):
            if len(row) != 3:
                raise DataError(f"{p}: row {i} has {len(row)} fields, expected 3")
            try:
                curves.setdefault(row[0], []).append((float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{p}: row {i} has a non-numeric value") from None
    if not curves:
        raise DataError(f"{p}: no curve points")
    return {c: np.array(sorted(v)) for c, v in curves.items()}


def render_svg(curves: dict[str, np.ndarray]) -> str:
    """One panel per category: observed vs predicted on [0,1]^2 with the diagonal."""
    w = len(curves) * (PANEL + MARGIN) + MARGIN
    h = PANEL + 2 * MARGIN
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>']
    for i, (cat, pts) in enumerate(curves.items()):
        x0, y0 = MARGIN + i * (PANEL + MARGIN), MARGIN

        def px(u, v):
            return f"{x0 + PANEL * u:.2f} {y0 + PANEL * (1 - v):.2f}"

        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in cat)
        label = cat.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        out.append(f'<g class="panel" id="curve-{safe}">')
        out.append(f'<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>')
        out.append(f'<path class="diagonal" d="M {px(0, 0)} L {px(1, 1)}" stroke="grey" stroke-dasharray="4 4" fill="none"/>')
        pts = np.clip(pts, 0.0, 1.0)
        d = "M " + " L ".join(px(u, v) for u, v in pts)
        out.append(f'<path class="curve" d="{d}" stroke="steelblue" stroke-width="2" fill="none"/>')
        out.append(f'<text x="{x0 + PANEL / 2}" y="{y0 - 10}" text-anchor="middle" font-size="14">{label}</text>')
        out.append(f'<text x="{x0 + PANEL / 2}" y="{y0 + PANEL + 28}" text-anchor="middle" font-size="11">Predicted risk</text>')
        out.append(f'<text x="{x0 - 26}" y="{y0 + PANEL / 2}" text-anchor="middle" font-size="11" '
                   f'transform="rotate(-90 {x0 - 26} {y0 + PANEL / 2})">Observed risk</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot_data(a) -> int:
    svg = render_svg(read_curves(a.curves))
    out = Path(a.out)
    if out.exists() and not a.force:
        raise OutputExists(f"refusing to overwrite {out} (use --force)")
    out.write_text(svg, encoding="utf-8")
    _emit(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpmkit", description="Multinomial risk prediction model toolkit")
    ap.add_argument("--version", action="version", version=f"mpmkit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def outputs(p, required=True):
        p.add_argument("--out", required=required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")

    def seeded(p, B):
        p.add_argument("--B", type=int, default=B, help=f"bootstrap replicates (default {B})")
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("fit", help="fit a model by maximum likelihood")
    p.add_argument("csv")
    p.add_argument("--outcome", required=True)
    p.add_argument("--reference", required=True, help="reference outcome category")
    p.add_argument("--transform-search", nargs="*", metavar="PREDICTOR",
                   help="compare power transformations (all predictors if none named)")
    outputs(p)
    p.set_defaults(func=cmd_fit)

    for name, fn, helptext in (("evaluate", cmd_evaluate, "calibration and discrimination of a model on data"),
                               ("validate-external", cmd_validate_external, "external validation report")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("model")
        p.add_argument("csv")
        p.add_argument("--outcome", required=True)
        p.add_argument("--no-curves", action="store_true", help="skip the smoothed calibration curves")
        seeded(p, 200)
        if name == "validate-external":
            p.add_argument("--dev-summary", help="case-mix JSON written by 'fit'")
        outputs(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("validate-internal", help="bootstrap optimism correction")
    p.add_argument("csv")
    p.add_argument("--outcome", required=True)
    p.add_argument("--reference", required=True)
    seeded(p, 200)
    outputs(p)
    p.set_defaults(func=cmd_validate_internal)

    p = sub.add_parser("update", help="recalibrate or refit a model on new data")
    p.add_argument("model")
    p.add_argument("csv")
    p.add_argument("--outcome", required=True)
    p.add_argument("--strategy", choices=("recalibrate", "refit"), required=True)
    outputs(p)
    p.set_defaults(func=cmd_update)

    ss = sub.add_parser("samplesize", help="minimum sample size calculations").add_subparsers(dest="kind", required=True)
    p = ss.add_parser("dev", help="model development")
    p.add_argument("--json", help="input file with Q, events (or prevalences and n) and options")
    p.add_argument("--Q", type=int, help="number of candidate predictor parameters")
    p.add_argument("--events", type=float, nargs="+", help="events per category, reference first")
    p.add_argument("--prevalences", type=float, nargs="+")
    p.add_argument("--n", type=float, help="total n (with --prevalences)")
    p.add_argument("--shrinkage", type=float, default=0.9)
    p.add_argument("--r2-fraction", dest="r2_fraction", type=float, default=0.15)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--chisq-divisor", dest="chisq_divisor", type=float, default=5.0)
    p.add_argument("--print-json", action="store_true", help="also print the JSON result")
    outputs(p, required=False)
    p.set_defaults(func=cmd_samplesize_dev)

    p = ss.add_parser("val", help="external validation (one value per submodel for each flag)")
    p.add_argument("--json", help="input file with a 'submodels' list")
    for f in _VAL_FIELDS:
        p.add_argument(f"--{f.replace('_', '-')}", dest=f, type=float, nargs="+")
    p.add_argument("--rounding", choices=("nearest", "ceil"), default="nearest")
    p.add_argument("--print-json", action="store_true")
    outputs(p, required=False)
    p.set_defaults(func=cmd_samplesize_val)

    p = sub.add_parser("plot-data", help="render curve points as an SVG calibration plot")
    p.add_argument("curves", help="curves.csv written by 'evaluate'")
    p.add_argument("--out", required=True, help="SVG file to write")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, OutputExists, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
