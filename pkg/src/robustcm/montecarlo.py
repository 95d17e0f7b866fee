"""
Monte Carlo harness: simulate the smooth-transition design, run the tests on
every replication and tabulate rejection frequencies.

The simulated process is

    y_t = zeta0 y_{t-1} + beta y_{t-1} / (1 + exp(-speed (y_{t-1} - pi0)))
          + varpi0 / (1 + y_{t-1}^2) + e_t,      e_t iid N(0, 1),

started at y_0 with a burn-in, and the model is fitted with x_t = y_{t-1}.
varpi0 = 0 gives the null; varpi0 > 0 adds a neglected nonlinearity.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .bootstrap import BootConfig, HGrid
from .cmtest import LambdaGrid
from .estimator import FitConfig
from .inference import LEVELS, TEST_NAMES, RunConfig, run_all_tests
from .model import ModelSpec, ParameterSpace, Sample
from .numerics import RngStream, gaussian_draws

BETA_MODES = ("strong", "weak", "none")
CSV_COLUMNS = ("test", "beta_mode", "varpi0", "level", "freq", "mc_se")
MAX_FAILURE_SHARE = 0.01


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ExperimentFailed(RuntimeError):
    """Too many replications failed."""


# --------------------------------------------------------------------------
# data generating process


@dataclass(frozen=True)
class DgpConfig:
    """Design of one simulated series.

    ``beta_mode`` picks beta: "strong" uses ``beta_strong``, "weak" uses
    ``weak_b / sqrt(n)`` and "none" uses 0.
    """

    n: int
    zeta0: float = 0.6
    beta_mode: str = "strong"
    pi0: float = 0.0
    varpi0: float = 0.0
    speed: float = 10.0
    burn_in: int = 100
    seed: int = 0
    replication: int = 0
    beta_strong: float = 0.3
    weak_b: float = 0.3
    y0: float = 0.0
    zero_noise: bool = False
    include_constant: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}")
        if not abs(self.zeta0 + self.beta) < 1:
            raise ValueError("|zeta0 + beta| must be below 1")

    @property
    def beta(self) -> float:
        if self.beta_mode == "strong":
            return self.beta_strong
        if self.beta_mode == "weak":
            return self.weak_b / math.sqrt(self.n)
        return 0.0


def simulate_dgp(config: DgpConfig) -> Sample:
    """Simulate ``burn_in + n`` steps from y_0 and keep the last n as a Sample."""
    total = config.burn_in + config.n
    if config.zero_noise:
        e = np.zeros(total)
    else:
        e = gaussian_draws(RngStream(config.seed, replication=config.replication, purpose="dgp"), total)
    y = np.empty(total + 1)
    y[0] = config.y0
    zeta, beta, pi0, varpi, c = config.zeta0, config.beta, config.pi0, config.varpi0, config.speed
    for t in range(1, total + 1):
        x = y[t - 1]
        y[t] = zeta * x + beta * x / (1.0 + math.exp(-c * (x - pi0))) + varpi / (1.0 + x * x) + e[t - 1]
    ys = y[config.burn_in + 1:]
    xs = y[config.burn_in:-1]
    X = np.column_stack([np.ones(config.n), xs]) if config.include_constant else xs[:, None]
    return Sample(ys, X)


# --------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    replications: int
    beta_modes: tuple = ("strong",)
    varpi0s: tuple = (0.0,)
    zeta0: float = 0.6
    pi0: float = 0.0
    beta_strong: float = 0.3
    weak_b: float = 0.3
    burn_in: int = 100
    speed: float = 10.0
    include_constant: bool = False
    fit: FitConfig = FitConfig()
    boot: BootConfig = BootConfig()
    hgrid: HGrid = HGrid()
    lambda_lo: float = 1.0
    lambda_hi: float = 5.0
    lambda_points: int | None = None
    kappa_a: float = 1.0
    levels: tuple = LEVELS
    master_seed: int = 0
    workers: int = 1
    tests: tuple = TEST_NAMES

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        for m in self.beta_modes:
            if m not in BETA_MODES:
                raise ValueError(f"unknown beta mode {m!r}")
        if tuple(self.levels) != LEVELS:
            raise ValueError(f"levels are fixed at {LEVELS}")

    @property
    def lambda_grid(self) -> LambdaGrid:
        pts = self.lambda_points if self.lambda_points is not None else min(self.n, 50)
        return LambdaGrid(self.lambda_lo, self.lambda_hi, pts)

    def cells(self) -> list[tuple[str, float]]:
        return [(b, float(v)) for b in self.beta_modes for v in self.varpi0s]

    def dgp(self, beta_mode: str, varpi0: float, replication: int) -> DgpConfig:
        return DgpConfig(
            n=self.n, zeta0=self.zeta0, beta_mode=beta_mode, pi0=self.pi0, varpi0=varpi0,
            speed=self.speed, burn_in=self.burn_in, seed=self.master_seed,
            replication=replication, beta_strong=self.beta_strong, weak_b=self.weak_b,
            include_constant=self.include_constant,
        )

    def echo(self) -> dict:
        d = asdict(self)
        d["hgrid"] = {"pi0_values": list(self.hgrid.pi0_values), "b_values": [float(np.ravel(b)[0]) for b in self.hgrid.b_values]}
        d["lambda_points"] = self.lambda_grid.points
        for k in ("beta_modes", "varpi0s", "levels", "tests"):
            d[k] = list(d[k])
        return d


def replication_seed(master_seed: int, replication: int, purpose: str) -> int:
    """64-bit seed derived from (master_seed, replication, purpose)."""
    stream = RngStream(master_seed, replication=replication, purpose=purpose)
    return int(stream.generator().integers(0, 2**63 - 1))


def _model_setup(cfg: ExperimentConfig):
    if cfg.include_constant:
        spec = ModelSpec(k_x=2, include_constant=True, speed=cfg.speed)
        space = ParameterSpace.wide(2, 2)
    else:
        spec = ModelSpec(k_x=1, speed=cfg.speed)
        space = ParameterSpace.star_default()
    return spec, space


def run_replication(cfg: ExperimentConfig, beta_mode: str, varpi0: float, r: int) -> dict:
    """One replication: simulate, test, and return reject flags and diagnostics."""
    spec, space = _model_setup(cfg)
    sample = simulate_dgp(cfg.dgp(beta_mode, varpi0, r))
    run_cfg = RunConfig(
        lambda_grid=cfg.lambda_grid,
        hgrid=cfg.hgrid,
        boot=replace(cfg.boot, seed=cfg.master_seed, replication=r),
        fit=replace(cfg.fit, start_seed=replication_seed(cfg.master_seed, r, "fit_starts")),
        space=space,
        kappa_a=cfg.kappa_a,
        lambda_seed=replication_seed(cfg.master_seed, r, "lambda_star"),
        tests=cfg.tests,
    )
    try:
        summary = run_all_tests(spec, sample, run_cfg)
    except Exception as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    if summary.errors:
        return {"ok": False, "error": "; ".join(f"{k}: {v}" for k, v in summary.errors.items())}
    flags = {(name, a): bool(d.reject[a]) for name, d in summary.decisions.items() for a in LEVELS}
    return {
        "ok": True,
        "flags": flags,
        "A_n": summary.pvalues.ics.A_n,
        "weak_selected": summary.pvalues.ics.weak_selected,
    }


def _run_task(args):
    cfg, beta_mode, varpi0, r = args
    return (beta_mode, varpi0, r), run_replication(cfg, beta_mode, varpi0, r)


# --------------------------------------------------------------------------
# rejection tables


@dataclass
class RejectionTable:
    """Rejection frequencies keyed by (test, beta_mode, varpi0, level)."""

    cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def lookup(self, test: str, beta_mode: str, varpi0: float, level: float) -> dict:
        for c in self.cells:
            if (c["test"], c["beta_mode"], c["varpi0"], c["level"]) == (test, beta_mode, float(varpi0), float(level)):
                return c
        raise KeyError((test, beta_mode, varpi0, level))

    def freq(self, test: str, beta_mode: str, varpi0: float, level: float) -> float:
        return self.lookup(test, beta_mode, varpi0, level)["freq"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            w.writerow([c["test"], c["beta_mode"], repr(c["varpi0"]), repr(c["level"]), repr(c["freq"]), repr(c["mc_se"])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"cells": self.cells, "metadata": self.metadata}, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "RejectionTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        cells = [{
            "test": r["test"], "beta_mode": r["beta_mode"], "varpi0": float(r["varpi0"]),
            "level": float(r["level"]), "freq": float(r["freq"]), "mc_se": float(r["mc_se"]),
        } for r in rows]
        return cls(cells, dict(metadata or {}))

    @classmethod
    def from_json(cls, text: str) -> "RejectionTable":
        d = json.loads(text)
        return cls(d["cells"], d["metadata"])

    def __eq__(self, other):
        return isinstance(other, RejectionTable) and self.cells == other.cells and self.metadata == other.metadata


def emit_table(table: RejectionTable, format: str = "both", path: str | None = None) -> dict:
    """Serialize ``table`` as CSV and/or JSON.

    With ``path`` given, writes ``path + '.csv'`` and/or ``path + '.json'``;
    returns a mapping from format to the serialized text.
    """
    if format not in ("csv", "json", "both"):
        raise ValueError("format must be csv, json or both")
    out = {}
    if format in ("csv", "both"):
        out["csv"] = table.to_csv()
    if format in ("json", "both"):
        out["json"] = table.to_json()
    if path is not None:
        for kind, text in out.items():
            with open(f"{path}.{kind}", "w", encoding="utf-8") as fh:
                fh.write(text)
    return out


def run_experiment(config: ExperimentConfig, progress=None) -> RejectionTable:
    """Run every (beta_mode, varpi0) cell for ``config.replications`` replications.

    Replication r of every cell uses the same noise stream, so the cells are
    compared on common random numbers. Results do not depend on the number
    of workers.

    Raises
    ------
    ExperimentFailed
        If 1% or more of the replications in some cell fail.
    """
    tasks = [(config, b, v, r) for b, v in config.cells() for r in range(config.replications)]
    results = {}
    if config.workers <= 1:
        for i, t in enumerate(tasks):
            key, res = _run_task(t)
            results[key] = res
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for i, (key, res) in enumerate(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * config.workers)))):
                results[key] = res
                if progress:
                    progress(i + 1, len(tasks))

    cells, failures, diag = [], {}, {}
    R = config.replications
    for b, v in config.cells():
        reps = [results[(b, v, r)] for r in range(R)]
        good = [x for x in reps if x["ok"]]
        nfail = R - len(good)
        failures[f"{b}|{v!r}"] = {"count": nfail, "errors": sorted({x["error"] for x in reps if not x["ok"]})[:5]}
        if nfail > 0 and nfail >= MAX_FAILURE_SHARE * R:
            raise ExperimentFailed(f"cell beta_mode={b} varpi0={v}: {nfail} of {R} replications failed")
        A = np.array([x["A_n"] for x in good])
        diag[f"{b}|{v!r}"] = {
            "A_n_median": float(np.median(A)) if A.size else None,
            "weak_selected_share": float(np.mean([x["weak_selected"] for x in good])) if good else None,
        }
        Rg = len(good)
        for name in TEST_NAMES:
            if name not in config.tests or not good or (name, LEVELS[0]) not in good[0]["flags"]:
                continue
            for a in LEVELS:
                k = sum(x["flags"][(name, a)] for x in good)
                p = k / Rg
                cells.append({
                    "test": name, "beta_mode": b, "varpi0": float(v), "level": float(a),
                    "freq": p, "mc_se": math.sqrt(p * (1 - p) / Rg),
                })
    meta = {
        "config": config.echo(),
        "code_version": __version__,
        "failures": failures,
        "diagnostics": diag,
    }
    # worker count does not affect results; keep it out of the comparable record
    meta["config"].pop("workers", None)
    return RejectionTable(cells, meta)


# --------------------------------------------------------------------------
# declarative config files


_FLOAT_KEYS = {"zeta0", "pi0", "beta_strong", "weak_b", "speed", "lambda_lo", "lambda_hi", "kappa_a"}
_INT_KEYS = {"n", "replications", "burn_in", "lambda_points", "master_seed", "workers",
             "boot_draws", "pi_star_grid", "n_starts", "boot_chunk"}
_LIST_KEYS = {"beta_modes", "varpi0s", "hgrid_pi", "hgrid_b", "tests"}
_BOOL_KEYS = {"include_constant"}
_OUT_KEYS = {"out", "format"}
VALID_KEYS = _FLOAT_KEYS | _INT_KEYS | _LIST_KEYS | _BOOL_KEYS | _OUT_KEYS


def parse_config_text(text: str) -> tuple[ExperimentConfig, dict]:
    """Parse ``key = value`` lines into an :class:`ExperimentConfig`.

    Returns the config and the output options (``out``, ``format``).
    Unknown keys and unparsable values raise :class:`ConfigError`.
    """
    if not text.lstrip().startswith("["):
        text = "[experiment]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    raw = {}
    for section in cp.sections():
        raw.update(cp[section])
    for key in raw:
        if key not in VALID_KEYS:
            raise ConfigError(key, "unknown configuration key")

    vals = {}
    for key, value in raw.items():
        try:
            if key in _FLOAT_KEYS:
                vals[key] = float(value)
            elif key in _INT_KEYS:
                vals[key] = int(value)
            elif key in _BOOL_KEYS:
                if value.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                vals[key] = value.strip().lower() in ("true", "1", "yes")
            elif key in _LIST_KEYS:
                items = [s.strip() for s in value.split(",") if s.strip()]
                vals[key] = items if key in ("beta_modes", "tests") else [float(s) for s in items]
            else:
                vals[key] = value.strip()
        except ValueError:
            raise ConfigError(key, f"cannot parse value {value!r}") from None

    if "n" not in vals or "replications" not in vals:
        raise ConfigError("n" if "n" not in vals else "replications", "required key missing")
    out = {k: vals.pop(k) for k in list(vals) if k in _OUT_KEYS}
    boot_kw = {}
    if "boot_draws" in vals:
        boot_kw["M"] = vals.pop("boot_draws")
    if "pi_star_grid" in vals:
        boot_kw["pi_star_grid"] = vals.pop("pi_star_grid")
    if "boot_chunk" in vals:
        boot_kw["chunk"] = vals.pop("boot_chunk")
    h_kw = {}
    if "hgrid_pi" in vals:
        h_kw["pi0_values"] = tuple(vals.pop("hgrid_pi"))
    if "hgrid_b" in vals:
        h_kw["b_values"] = tuple(vals.pop("hgrid_b"))
    fit_kw = {}
    if "n_starts" in vals:
        fit_kw["n_starts"] = vals.pop("n_starts")
    for key in ("beta_modes", "varpi0s", "tests"):
        if key in vals:
            vals[key] = tuple(vals[key])
    if "tests" in vals:
        bad = [t for t in vals["tests"] if t not in TEST_NAMES]
        if bad:
            raise ConfigError("tests", f"unknown test {bad[0]!r}")
    try:
        cfg = ExperimentConfig(boot=BootConfig(**boot_kw), hgrid=HGrid(**h_kw), fit=FitConfig(**fit_kw), **vals)
    except ValueError as exc:
        raise ConfigError("<config>", str(exc)) from None
    return cfg, out


def load_config(path: str) -> tuple[ExperimentConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def stderr_progress(done: int, total: int) -> None:
    if done == total or done % max(1, total // 20) == 0:
        print(f"[mc] {done}/{total} replications", file=sys.stderr, flush=True)


__all__ = [
    "BETA_MODES",
    "CSV_COLUMNS",
    "ConfigError",
    "DgpConfig",
    "ExperimentConfig",
    "ExperimentFailed",
    "RejectionTable",
    "emit_table",
    "load_config",
    "parse_config_text",
    "replication_seed",
    "run_experiment",
    "run_replication",
    "simulate_dgp",
    "stderr_progress",
]
