"""Command-line front end: ``iiccff {meta,fuse,bench,convert,curve}``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 degenerate
data (raised by the analysis, or any degeneracy flag under ``--strict``).
"""

from __future__ import annotations

import argparse
import ast
import json
import operator
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import numerics as nm
from .bench import THREADS_ENV, default_threads, load_scenario, neyman_scott, read_pairs, run_benchmark
from .convert import chi2_convert, normal_convert
from .curves import (
    ConfidenceCurve,
    ConfidenceDistribution,
    ConfidenceLogLik,
    ParamGrid,
    StudySummary,
    cc_from_cd,
    cd_from_interval,
    median_cd,
    normal_cd,
    read_curve,
    summarize,
    t_cd,
    write_curve,
)
from .errors import DegenerateDataError, IICCFFError, InputError, NumericalError
from .fixtures import fixture_path
from .fuse import DEFAULT_LEVELS, FocusMap, _jsonable, add_prior, fuse_fixed, fuse_linked, fusion_result, parabola_focus
from .meta_normal import exact_cc_tau, profile_psi0, qk_cd_tau, read_studies, tau_profiles
from .meta_tables import (
    EffectMeasure,
    fused_cc_exact_or,
    mantel_haenszel,
    optimal_cd_common,
    random_effects_2x2,
    read_tables,
    standard_iiccff,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 2, 3, 4


# -------------------------------------------------------------- small parsers


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    if p.parent == Path(".") and (not p.suffix or p.suffix in (".csv", ".json")):
        try:
            return fixture_path(p.name)
        except InputError:
            pass
    raise InputError(f"input file not found: {path}")


def parse_grid(text: str | None) -> ParamGrid | None:
    """``lo:hi:n`` -> evenly spaced grid."""
    if text is None:
        return None
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise InputError(f"grid must look like lo:hi:n, got {text!r}") from None
    if not (hi > lo and n >= 2):
        raise InputError("grid needs hi > lo and at least two points")
    return ParamGrid.linspace(lo, hi, n)


def parse_prior(text: str) -> Callable:
    """``normal:mean:sd`` -> log-density (up to a constant) of the focus prior."""
    parts = text.split(":")
    try:
        if len(parts) != 3 or parts[0] != "normal":
            raise ValueError
        m, s = float(parts[1]), float(parts[2])
    except ValueError:
        raise InputError(f"prior must look like normal:mean:sd, got {text!r}") from None
    if not s > 0:
        raise InputError("prior standard deviation must be positive")
    return lambda x: -0.5 * ((np.asarray(x, dtype=float) - m) / s) ** 2


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"log": np.log, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs, "ratio": lambda a, b: a / b}


def compile_focus(expr: str, names: Sequence[str]) -> Callable:
    """Compile an arithmetic focus expression over source names.

    Allowed: numbers, the names, ``+ - * / **``, unary minus and the
    functions ``log exp sqrt abs ratio``.  The result maps a parameter
    vector (or a ``(d, n)`` array of vectors) to focus values.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise InputError(f"cannot parse focus expression {expr!r}: {exc.msg}") from None
    index = {n: i for i, n in enumerate(names)}

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return
        if isinstance(node, ast.Name):
            if node.id not in index:
                raise InputError(f"unknown name {node.id!r} in focus; sources are {list(names)}")
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            check(node.operand)
            return
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and not node.keywords):
            for a in node.args:
                check(a)
            return
        raise InputError(f"unsupported construct in focus expression: {ast.dump(node)[:60]}")

    check(tree)

    def ev(node, psi):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return psi[index[node.id]]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, psi), ev(node.right, psi))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](ev(node.operand, psi))
        return _FUNCS[node.func.id](*[ev(a, psi) for a in node.args])

    def focus(psi):
        psi = np.asarray(psi, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = ev(tree.body, psi)
        return out if np.ndim(out) else float(out)

    return focus


# ------------------------------------------------------------------- output


def _summary_dict(cc: ConfidenceCurve, levels, estimate=None) -> dict:
    out = {"estimate": float(cc.grid.values[int(np.argmin(cc.values))]) if estimate is None else float(estimate),
           "intervals": {}, "open_at_hi": {}, "open_at_lo": {}, "boundary_mass": float(cc.boundary_mass_at_lo)}
    for lev in levels:
        try:
            s = summarize(cc, lev)
        except DegenerateDataError:
            continue
        key = f"{lev:g}"
        out["intervals"][key] = [[float(a), float(b)] for a, b in s.intervals]
        out["open_at_hi"][key] = s.open_at_hi
        out["open_at_lo"][key] = s.open_at_lo
    return out


def _echo(summary: dict, out=None):
    out = out or sys.stdout
    print(f"estimate: {summary['estimate']:.6g}", file=out)
    for key, ivs in summary.get("intervals", {}).items():
        txt = " U ".join(f"[{a:.6g}, {b:.6g}]" for a, b in ivs)
        flags = []
        if summary.get("open_at_lo", {}).get(key):
            flags.append("open below")
        if summary.get("open_at_hi", {}).get(key):
            flags.append("open above")
        lev = float(key)
        print(f"{100 * lev:g}% interval: {txt}" + (f" ({', '.join(flags)})" if flags else ""), file=out)
    if summary.get("boundary_mass"):
        print(f"boundary mass at lower end: {summary['boundary_mass']:.6g}", file=out)


def _config(args) -> dict:
    skip = {"func"}
    return _jsonable({k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip})


def _finish(args, curve, summary: dict, warnings: list, kind: str = "cc") -> int:
    summary = dict(summary)
    summary["warnings"] = list(warnings)
    summary["config"] = _config(args)
    _echo(summary)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        if curve is not None:
            write_curve(out, curve, kind, tuple(args.levels), extra={"summary": _jsonable(summary)})
        else:
            out.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    if args.strict and warnings:
        print("error: degenerate data flagged (--strict)", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def _result_warnings(res, summary) -> list:
    w = []
    d = res.diagnostics if hasattr(res, "diagnostics") else {}
    if d.get("border_rule_triggered"):
        w.append("spread estimate hits zero for some focus values (border rule applied)")
    if d.get("all_control_arms_empty"):
        w.append("no events in any control arm")
    if d.get("all_treatment_arms_empty"):
        w.append("no events in any treatment arm")
    for side in ("ml_at_plus_infinity", "ml_at_minus_infinity"):
        if d.get(side):
            w.append(f"maximum likelihood estimate at {side.split('_at_')[1].replace('_', ' ')}")
    if any(summary.get("open_at_hi", {}).values()) or any(summary.get("open_at_lo", {}).values()):
        w.append("confidence region reaches the grid end (interval may be unbounded)")
    return w


# ------------------------------------------------------------------- meta


def cmd_meta(args) -> int:
    path = _resolve(args.input)
    grid = parse_grid(args.grid)
    levels = tuple(args.levels)
    if args.model == "normal-re":
        inp = read_studies(path)
        if args.focus == "psi0":
            res = profile_psi0(inp, corrected=args.correct, grid=grid, levels=levels, border_rule=args.border_rule)
            summary = res.to_dict()
            return _finish(args, res.cc, summary, _result_warnings(res, summary))
        variant = args.variant or "cml"
        if variant not in ("ml", "cml"):
            raise InputError("--variant for the spread must be 'ml' or 'cml'")
        if args.calibrate == "exact":
            cc = exact_cc_tau(inp, variant, None if grid is None else grid.values, sims=args.sims,
                              rng=nm.RngStream(args.seed))
        elif args.calibrate == "qk":
            cc = cc_from_cd(qk_cd_tau(inp, None if grid is None else grid.values))
        else:
            first = tau_profiles(inp, None if grid is None else grid.values)
            t_hat = first.tau_ml if variant == "ml" else first.tau_cml
            prof = tau_profiles(inp, np.union1d(first.tau, [t_hat]))
            crit = prof.A if variant == "ml" else prof.B
            res = fusion_result(ParamGrid(prof.tau), -0.5 * crit, levels, boundary_mass=0.0)
            cc = res.cc
        summary = _summary_dict(cc, levels)
        # tau = 0 is the edge of the parameter space, not of an arbitrary grid
        summary["open_at_lo"] = {k: False for k in summary["open_at_lo"]}
        w = ["spread estimate is zero"] if summary["estimate"] == 0 else []
        return _finish(args, cc, summary, w)

    if args.model == "neyman-scott":
        pairs = read_pairs(path)
        cc = neyman_scott(pairs, args.variant or "corrected", grid)
        summary = _summary_dict(cc, levels)
        return _finish(args, cc, summary, [])

    measure = EffectMeasure.parse(args.model.split("-", 1)[1])
    tables = read_tables(path)
    method = args.method or "standard"
    if method == "mh":
        r = mantel_haenszel(tables, measure, max(levels))
        summary = {"estimate": r.estimate, "intervals": {f"{max(levels):g}": [list(r.interval)]},
                   "variance": r.variance, "whole_line": r.whole_line}
        return _finish(args, None, summary, ["interval is the whole line"] if r.whole_line else [])
    if method in ("exact", "optimal", "random") and measure is not EffectMeasure.OR:
        raise InputError(f"method {method!r} is available only for the odds ratio")
    if method == "optimal":
        cd = optimal_cd_common(tables, grid, sims=args.sims, rng=nm.RngStream(args.seed), method="simulate")
        cc = cc_from_cd(cd)
        summary = _summary_dict(cc, levels)
        return _finish(args, cc, summary, _result_warnings(cd, summary))
    if method == "exact":
        res = fused_cc_exact_or(tables, grid, levels)
    elif method == "random":
        res = random_effects_2x2(tables, grid, corrected=args.correct, levels=levels)
    else:
        res = standard_iiccff(tables, measure, grid, levels)
    summary = res.to_dict()
    return _finish(args, res.cc, summary, _result_warnings(res, summary))


# ------------------------------------------------------------------- fuse


def _sources_from_args(args) -> list:
    """``(name, ConfidenceLogLik, description, cc or None)`` in declaration order."""
    out = []
    if args.intervals:
        import csv

        p = _resolve(args.intervals)
        with p.open(newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"name", "lo", "median", "hi"}
            if not reader.fieldnames or not need <= set(reader.fieldnames):
                raise InputError(f"{p}: header must contain name,lo,median,hi")
            for lineno, row in enumerate(reader, start=2):
                try:
                    vals = float(row["median"]), float(row["lo"]), float(row["hi"])
                except (TypeError, ValueError):
                    raise InputError(f"{p}: malformed row {lineno}") from None
                out.append((row["name"].strip(), vals))
    for spec in args.interval or []:
        name, _, rest = spec.partition("=")
        try:
            vals = tuple(float(v) for v in rest.split(","))
            if len(vals) != 3:
                raise ValueError
        except ValueError:
            raise InputError(f"--interval must look like NAME=median,lo,hi, got {spec!r}") from None
        out.append((name.strip(), vals))
    sources = []
    for name, (m, lo, hi) in out:
        cd, a, s = cd_from_interval(m, lo, hi, args.source_level)
        cc = cc_from_cd(cd)
        sources.append((name, chi2_convert(cc), {"median": m, "lo": lo, "hi": hi, "a": a, "s": s}, cc))
    for spec in args.curve or []:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"--curve must look like NAME=PATH, got {spec!r}")
        curve = read_curve(_resolve(path))
        cc = cc_from_cd(curve) if isinstance(curve, ConfidenceDistribution) else curve
        sources.append((name.strip(), _to_loglik(curve, "chi2"), {"file": path},
                        cc if isinstance(cc, ConfidenceCurve) else None))
    names = [s[0] for s in sources]
    if not sources:
        raise InputError("no sources given (use --interval, --intervals or --curve)")
    if len(set(names)) != len(names) or not all(n.isidentifier() for n in names):
        raise InputError(f"source names must be distinct identifiers, got {names}")
    return sources


def _to_loglik(curve, method: str) -> ConfidenceLogLik:
    if isinstance(curve, ConfidenceLogLik):
        return curve
    if method == "normal":
        if not isinstance(curve, ConfidenceDistribution):
            raise InputError("normal conversion needs a CD file")
        return normal_convert(curve)
    if isinstance(curve, ConfidenceDistribution):
        curve = cc_from_cd(curve)
    if not isinstance(curve, ConfidenceCurve):
        raise InputError("expected a cc, cd or loglik curve file")
    return chi2_convert(curve)


def _fuse_parabola(lls, xs, grid, levels):
    links, focus, complete = parabola_focus(xs)
    centres = np.array([ll.argmax for ll in lls])
    b = np.polyfit(xs, centres, 2)[::-1]
    if grid is None:
        span = max(xs) - min(xs)
        grid = ParamGrid.linspace(min(xs) - 0.5 * span, max(xs) + 0.5 * span, 201)
    return fuse_linked(lls, links, focus, complete, grid, start=[b[0], b[2]], levels=levels)


def cmd_fuse(args) -> int:
    sources = _sources_from_args(args)
    names = [s[0] for s in sources]
    lls = [s[1] for s in sources]
    grid = parse_grid(args.grid)
    levels = tuple(args.levels)
    expr = args.focus or (names[0] if len(names) == 1 else None)
    if expr is None:
        raise InputError("--focus is required with more than one source")
    if expr == "parabola":
        if not args.x or len(args.x) != len(lls):
            raise InputError("the parabola focus needs --x with one design point per source")
        res = _fuse_parabola(lls, np.asarray(args.x, dtype=float), grid, levels)
    elif len(lls) == 1 and expr.strip() == names[0]:
        cc = sources[0][3]
        if cc is not None and grid is None and not args.prior:
            # a single source under the identity focus is its own fused curve
            summary = _summary_dict(cc, levels)
            summary["sources"] = {names[0]: sources[0][2]}
            return _finish(args, cc, summary, [])
        res = fuse_fixed(lls, FocusMap.identity(), lls[0].grid if grid is None else grid, levels)
    else:
        focus = compile_focus(expr, names)
        res = fuse_fixed(lls, FocusMap(len(lls), focus), grid, levels)
    if args.prior:
        prior = parse_prior(args.prior)
        res = fusion_result(res.grid, add_prior(res.loglik, prior).values, levels,
                            {**res.diagnostics, "prior": args.prior})
    summary = res.to_dict()
    summary["sources"] = {s[0]: s[2] for s in sources}
    return _finish(args, res.cc, summary, _result_warnings(res, summary))


# ------------------------------------------------------------------ bench


def cmd_bench(args) -> int:
    sc = load_scenario(_resolve(args.scenario))
    if args.reps is not None:
        sc.reps = args.reps
    if args.seed_override is not None:
        sc.seed = args.seed_override
    if args.methods:
        sc = type(sc).from_dict({**sc.to_dict(), "methods": args.methods})
    report = run_benchmark(sc, threads=args.threads)
    sys.stdout.write(report.to_csv())
    for key, val in report.extras.items():
        print(f"{key}: {json.dumps(_jsonable(val), sort_keys=True)}")
    out = args.out or f"{sc.name or sc.kind}_report"
    config = _config(args)
    config.pop("threads", None)  # reports do not depend on the thread count
    report.write(out, dump=args.dump, config=config)
    return EXIT_OK


# ---------------------------------------------------------------- convert


def cmd_convert(args) -> int:
    curve = read_curve(_resolve(args.input))
    ll = _to_loglik(curve, args.method)
    write_curve(Path(args.out), ll, "loglik", extra={"source": str(args.input), "method": args.method})
    print(f"wrote {args.out} ({len(ll.grid)} points, maximum at {ll.argmax:.6g})")
    return EXIT_OK


# ------------------------------------------------------------------ curve


def cmd_curve(args) -> int:
    grid = parse_grid(args.grid)
    levels = tuple(args.levels)
    extra = {}
    if args.kind in ("normal", "t"):
        if args.estimate is None or args.stddev is None:
            raise InputError(f"{args.kind} curves need --estimate and --stddev")
        if args.kind == "t":
            if args.df is None:
                raise InputError("t curves need --df")
            cd = t_cd(StudySummary(args.estimate, args.stddev, args.df), grid)
        else:
            cd = normal_cd(StudySummary(args.estimate, args.stddev), grid)
        cc = cc_from_cd(cd)
    elif args.kind == "interval":
        if None in (args.median, args.lo, args.hi):
            raise InputError("interval curves need --median, --lo and --hi")
        cd, a, s = cd_from_interval(args.median, args.lo, args.hi, args.source_level, grid)
        cc = cc_from_cd(cd)
        extra = {"a": a, "s": s}
    else:
        if args.sample:
            sample = np.loadtxt(_resolve(args.sample), delimiter=",", ndmin=1, comments="#")
        elif args.values:
            sample = np.asarray(args.values, dtype=float)
        else:
            raise InputError("median curves need --sample FILE or --values")
        cc = median_cd(sample.ravel(), grid)
        cd = cc.cd
    summary = _summary_dict(cc, levels, estimate=cd.quantile(0.5))
    summary.update(extra)
    return _finish(args, cd, summary, [], kind="cd")


# ------------------------------------------------------------------ parser


def _levels(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers, got {text!r}") from None
    if not all(0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("levels must lie in (0, 1)")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--levels", type=_levels, default=list(DEFAULT_LEVELS),
                        help="comma-separated confidence levels (default 0.9,0.95)")
    common.add_argument("--grid", help="focus grid lo:hi:n")
    common.add_argument("--out", help="output path (curve CSV with JSON sidecar, or report base name)")
    common.add_argument("--seed", type=int, default=0, help="random seed for simulation steps")
    common.add_argument("--sims", type=int, default=10_000, help="simulation size for calibrated curves")
    common.add_argument("--strict", action="store_true", help="treat degenerate-data flags as errors (exit 4)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads for simulation loops (default ${THREADS_ENV} or 1)")

    p = argparse.ArgumentParser(prog="iiccff", description="Confidence-distribution fusion across sources.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("meta", parents=[common], help="meta-analysis of study summaries, 2x2 tables or pairs")
    m.add_argument("--model", required=True,
                   choices=["normal-re", "tables-or", "tables-rr", "tables-rd", "neyman-scott"])
    m.add_argument("--input", required=True, help="CSV file or shipped fixture name")
    m.add_argument("--focus", choices=["psi0", "tau"], default="psi0")
    m.add_argument("--correct", dest="correct", action="store_true", default=True,
                   help="apply the profile correction (default)")
    m.add_argument("--no-correct", dest="correct", action="store_false")
    m.add_argument("--border-rule", choices=["whole", "pointwise"], default="whole")
    m.add_argument("--calibrate", choices=["wilks", "exact", "qk"], default="wilks")
    m.add_argument("--variant", choices=["ml", "cml", "gold", "standard", "corrected"])
    m.add_argument("--method", choices=["standard", "exact", "optimal", "mh", "random"])
    m.set_defaults(func=cmd_meta)

    f = sub.add_parser("fuse", parents=[common], help="fuse per-source curves for a focus parameter")
    f.add_argument("--interval", action="append", metavar="NAME=MEDIAN,LO,HI")
    f.add_argument("--intervals", metavar="CSV", help="CSV with name,lo,median,hi columns")
    f.add_argument("--curve", action="append", metavar="NAME=PATH")
    f.add_argument("--source-level", type=float, default=0.95, help="level of the interval summaries")
    f.add_argument("--focus", help="focus expression over source names, or 'parabola'")
    f.add_argument("--x", type=float, nargs="+", help="design points for the parabola focus")
    f.add_argument("--prior", help="prior on the focus, normal:mean:sd")
    f.set_defaults(func=cmd_fuse)

    b = sub.add_parser("bench", parents=[common], help="run a Monte-Carlo benchmark scenario")
    b.add_argument("scenario", help="scenario JSON file or shipped scenario name")
    b.add_argument("--methods", nargs="+")
    b.add_argument("--reps", type=int)
    b.add_argument("--scenario-seed", dest="seed_override", type=int, help="override the scenario seed")
    b.add_argument("--dump", action="store_true", help="include per-replication records in the JSON")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("convert", parents=[common], help="convert a cc/cd curve file to a log-likelihood file")
    c.add_argument("input")
    c.add_argument("--method", choices=["chi2", "normal"], default="chi2")
    c.set_defaults(func=cmd_convert)

    k = sub.add_parser("curve", parents=[common], help="construct a single-source curve")
    k.add_argument("kind", choices=["normal", "t", "median", "interval"])
    k.add_argument("--estimate", type=float)
    k.add_argument("--stddev", type=float)
    k.add_argument("--df", type=int)
    k.add_argument("--median", type=float)
    k.add_argument("--lo", type=float)
    k.add_argument("--hi", type=float)
    k.add_argument("--source-level", type=float, default=0.95)
    k.add_argument("--sample", help="file with one observation per line")
    k.add_argument("--values", type=float, nargs="+")
    k.set_defaults(func=cmd_curve)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is None and args.command == "bench":
            args.threads = default_threads()
        if args.command == "convert" and not args.out:
            raise InputError("convert needs --out")
        return args.func(args)
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IICCFFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
