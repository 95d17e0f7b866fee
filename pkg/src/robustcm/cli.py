"""
Command-line front end.

    robustcm test DATA.csv [options]     run the eleven tests on a data file
    robustcm mc CONFIG [options]         run a Monte Carlo experiment
    robustcm dgp --n N [options]         simulate a series and write y,x1 CSV

Exit codes: 0 success, 2 estimation failure, 3 input/output error,
4 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from importlib import resources

import jsonschema
import numpy as np

from .bootstrap import BootConfig, HGrid
from .cmtest import DegenerateScale, LambdaGrid
from .estimator import EstimationFailed
from .inference import RunConfig, run_all_tests
from .model import ModelSpec, ParameterSpace, Sample
from .montecarlo import (
    ConfigError,
    DgpConfig,
    ExperimentFailed,
    emit_table,
    load_config,
    run_experiment,
    simulate_dgp,
    stderr_progress,
)
from .numerics import NearSingular

EXIT_OK, EXIT_ESTIMATION, EXIT_IO, EXIT_CONFIG = 0, 2, 3, 4
MIN_ROWS = 30


class InputError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def read_data_csv(path: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a ``y,x1[,x2,...]`` file. Raises :class:`InputError` with a line number."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "y" or not all(h.startswith("x") for h in header[1:]):
            raise InputError(f"{path}: line 1: header must be y,x1[,x2,...]")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: line {line_no}: expected {len(header)} fields, found {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise InputError(f"{path}: line {line_no}: non-numeric field") from None
            if not np.all(np.isfinite(vals)):
                raise InputError(f"{path}: line {line_no} (data row {len(rows) + 1}): non-finite value")
            rows.append(vals)
    if len(rows) < MIN_ROWS:
        raise InputError(f"{path}: {len(rows)} data rows, at least {MIN_ROWS} required")
    data = np.array(rows)
    return data[:, 0], data[:, 1:], header


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not np.isfinite(x) else x
    return x


def build_report(summary, settings: dict) -> dict:
    surf, pv = summary.surface, summary.pvalues
    p_star = None
    if pv.p_star is not None:
        p_star = {
            "M": pv.p_star.M,
            "h_points": [{"pi0": h.pi0, "b": h.b} for h in pv.p_star.h_points],
            "matrix": pv.p_star.p_star,
        }
    report = {
        "settings": settings,
        "fit": summary.fit.to_dict(),
        "surface": {
            "lambda": surf.lambda_grid.values,
            "numerator": surf.numerator,
            "v2": surf.v2,
            "T": surf.T,
            "degenerate": surf.degenerate_mask,
        },
        "ics": {
            "A_n": pv.ics.A_n,
            "kappa_n": pv.ics.kappa_n,
            "weak_selected": pv.ics.weak_selected,
            "Sigma_hat": pv.ics.Sigma_hat,
        },
        "pvalues": {"p_inf": pv.p_inf, "p_lf": pv.p_lf, "p_ics1": pv.p_ics1, "p_star": p_star},
        "lambda_star": {
            "lambda_star": summary.lambda_star.lambda_star,
            "draw_seed": summary.lambda_star.draw_seed,
            "index": summary.lambda_star.index,
        },
        "decisions": summary.to_records(),
        "errors": summary.errors,
    }
    return _jsonable(report)


def report_schema() -> dict:
    text = resources.files("robustcm").joinpath("schemas/test_report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(report: dict) -> None:
    jsonschema.validate(report, report_schema())


def format_decisions(summary) -> str:
    lines = [f"{'test':<11} {'kind':<6} {'statistic':>10}  {'1%':>12} {'5%':>12} {'10%':>12}"]
    for name, d in summary.decisions.items():
        cells = []
        for a in (0.01, 0.05, 0.10):
            v = d.value[a]
            mark = "*" if d.reject[a] else " "
            cells.append(f"{v:>11.4f}{mark}" if np.isfinite(v) else f"{'n/a':>11} ")
        stat = f"{d.statistic:>10.4f}" if np.isfinite(d.statistic) else f"{'n/a':>10}"
        lines.append(f"{name:<11} {d.kind:<6} {stat}  " + " ".join(cells))
    ics = summary.pvalues.ics
    lines.append("")
    lines.append(f"A_n = {ics.A_n:.4f}, kappa_n = {ics.kappa_n:.4f}, "
                 f"{'weak' if ics.weak_selected else 'strong'} identification selected; * = reject")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# subcommands


def cmd_test(args) -> int:
    try:
        y, X, header = read_data_csv(args.data)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    k_x = X.shape[1]
    try:
        spec = ModelSpec(k_x=k_x, speed=args.speed, include_constant=args.intercept,
                         transition_index=args.transition_index)
        space = ParameterSpace.star_default() if k_x == 1 else ParameterSpace.wide(k_x, k_x)
        cfg = RunConfig(
            lambda_grid=LambdaGrid(args.lambda_lo, args.lambda_hi, args.lambda_points),
            hgrid=HGrid(tuple(args.hgrid_pi), tuple(args.hgrid_b)),
            boot=BootConfig(M=args.boot_draws, seed=args.seed),
            space=space,
            kappa_a=args.kappa_a,
            lambda_seed=args.seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    settings = {
        "data": header, "n": int(len(y)), "intercept": bool(args.intercept), "speed": args.speed,
        "lambda": [args.lambda_lo, args.lambda_hi, args.lambda_points],
        "hgrid_pi": list(args.hgrid_pi), "hgrid_b": list(args.hgrid_b),
        "boot_draws": args.boot_draws, "seed": args.seed, "kappa_a": args.kappa_a,
    }
    try:
        summary = run_all_tests(spec, Sample(y, X), cfg)
    except (EstimationFailed, NearSingular, DegenerateScale) as exc:
        print(f"estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    report = build_report(summary, settings)
    validate_report(report)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
            return EXIT_IO
    if args.format == "json" and not args.out:
        print(text)
    else:
        print(format_decisions(summary))
    return EXIT_OK


def cmd_mc(args) -> int:
    try:
        cfg, out = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid configuration key {exc.key!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    path = args.out or out.get("out") or "mc_table"
    fmt = args.format or out.get("format") or "both"
    if fmt not in ("csv", "json", "both"):
        print(f"invalid configuration key 'format': {fmt!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        table = run_experiment(cfg, progress=stderr_progress)
    except ExperimentFailed as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    try:
        emit_table(table, fmt, path)
    except OSError as exc:
        print(f"error: cannot write {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_dgp(args) -> int:
    try:
        cfg = DgpConfig(n=args.n, zeta0=args.zeta0, beta_mode=args.beta_mode, pi0=args.pi0,
                        varpi0=args.varpi0, speed=args.speed, burn_in=args.burn_in, seed=args.seed,
                        beta_strong=args.beta_strong, weak_b=args.weak_b, zero_noise=args.zero_noise)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sample = simulate_dgp(cfg)
    lines = ["y,x1"] + [f"{a!r},{b!r}" for a, b in zip(sample.y.tolist(), sample.X[:, 0].tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
            return EXIT_IO
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustcm", description="Identification-robust conditional moment tests")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="run the eleven tests on a y,x1,... CSV file")
    t.add_argument("data", help="CSV with header y,x1,...; first column is the response")
    t.add_argument("--lambda-lo", type=float, default=1.0, help="lower end of the lambda grid")
    t.add_argument("--lambda-hi", type=float, default=5.0, help="upper end of the lambda grid")
    t.add_argument("--lambda-points", type=int, default=25, help="number of lambda grid points")
    t.add_argument("--boot-draws", type=int, default=500, help="bootstrap draws M")
    t.add_argument("--seed", type=int, default=0, help="seed for bootstrap draws, starts and lambda*")
    t.add_argument("--hgrid-pi", type=_float_list, default=list(HGrid().pi0_values),
                   help="comma list of pi0 values; use --hgrid-pi=-1,0,1 for negatives")
    t.add_argument("--hgrid-b", type=_float_list, default=list(HGrid().b_values), help="comma list of b values")
    t.add_argument("--kappa-a", type=float, default=1.0, help="scale a in kappa_n = a ln ln n")
    t.add_argument("--speed", type=float, default=10.0, help="logistic transition speed")
    t.add_argument("--intercept", action="store_true", help="add a constant regressor")
    t.add_argument("--transition-index", type=int, default=None, help="regressor column driving the transition")
    t.add_argument("--workers", type=int, default=1, help="accepted for symmetry; the test runs single-threaded")
    t.add_argument("--out", default=None, help="JSON report path")
    t.add_argument("--format", choices=("text", "json"), default="text")
    t.set_defaults(func=cmd_test)

    m = sub.add_parser("mc", help="run a Monte Carlo experiment from a key = value config file")
    m.add_argument("config", help="key = value experiment file")
    m.add_argument("--workers", type=int, default=None, help="worker processes; results do not depend on it")
    m.add_argument("--out", default=None, help="output path stem (writes .csv and/or .json)")
    m.add_argument("--format", choices=("csv", "json", "both"), default=None)
    m.set_defaults(func=cmd_mc)

    d = sub.add_parser("dgp", help="simulate the smooth-transition design")
    d.add_argument("--n", type=int, required=True, help="sample size after burn-in")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--beta-mode", choices=("strong", "weak", "none"), default="strong",
                   help="beta = beta_strong, weak_b/sqrt(n) or 0")
    d.add_argument("--beta-strong", type=float, default=0.3)
    d.add_argument("--weak-b", type=float, default=0.3)
    d.add_argument("--zeta0", type=float, default=0.6)
    d.add_argument("--pi0", type=float, default=0.0)
    d.add_argument("--varpi0", type=float, default=0.0, help="size of the omitted term varpi0/(1+y^2)")
    d.add_argument("--speed", type=float, default=10.0)
    d.add_argument("--burn-in", type=int, default=100)
    d.add_argument("--zero-noise", action="store_true", help="set all shocks to zero")
    d.add_argument("--out", default=None, help="CSV path; stdout when omitted")
    d.set_defaults(func=cmd_dgp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
