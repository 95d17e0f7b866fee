"""
P-value combinations, smoothing over lambda, and the eleven test decisions.

Test names
----------
rand_T      chi-squared p-value at one random lambda
sup_p       largest chi-squared p-value over the grid
sup_T       sup_lambda T_n with a strong-identification bootstrap p-value
ave_T       grid average of T_n, bootstrapped the same way
pvot_chi2   p-value occupation time of the chi-squared p-values
rand_LF     least-favorable p-value at the random lambda
rand_ICS1   identification-category-selection p-value at the random lambda
supP_LF     largest least-favorable p-value over the grid
supP_ICS1   largest ICS p-value over the grid
pvot_LF     occupation time of the least-favorable p-values
pvot_ICS1   occupation time of the ICS p-values
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bootstrap import BootConfig, BootPValueMatrix, HGrid, robust_pvalues, strong_id_bootstrap
from .cmtest import IcsDiagnostics, LambdaGrid, TestSurface, build_components, ics_statistic, test_surface
from .estimator import FitConfig, FitResult, fit
from .model import ModelSpec, ParameterSpace, Sample
from .numerics import RngStream, chi2_1_sf

LEVELS = (0.01, 0.05, 0.10)

TEST_NAMES = (
    "rand_T", "sup_p", "sup_T", "ave_T", "pvot_chi2",
    "rand_LF", "rand_ICS1", "supP_LF", "supP_ICS1", "pvot_LF", "pvot_ICS1",
)
ROBUST_TESTS = frozenset({"rand_LF", "rand_ICS1", "supP_LF", "supP_ICS1", "pvot_LF", "pvot_ICS1"})
STRONG_BOOT_TESTS = frozenset({"sup_T", "ave_T"})


# --------------------------------------------------------------------------
# elementary combinations


def p_inf(surface: TestSurface) -> np.ndarray:
    """Chi-squared(1) p-value per lambda; NaN on degenerate lambdas."""
    out = np.full(surface.T.shape, np.nan)
    use = surface.usable
    out[use] = chi2_1_sf(surface.T[use])
    return out


def lf_pvalue(p_star_row, p_inf_value: float) -> float:
    """Least-favorable p-value: max over the nuisance grid and the chi-squared p-value."""
    row = np.asarray(p_star_row, dtype=float)
    if row.size == 0:
        raise ValueError("least-favorable p-value needs a nonempty nuisance grid")
    return float(max(np.max(row), p_inf_value))


def ics1_pvalue(p_lf: float, p_inf_value: float, ics: IcsDiagnostics) -> float:
    """Least-favorable p-value when A_n <= kappa_n, chi-squared p-value otherwise."""
    return p_lf if ics.A_n <= ics.kappa_n else p_inf_value


def pvot(pvals, alpha: float) -> float:
    """Share of (non-NaN) grid points whose p-value is strictly below ``alpha``."""
    p = np.asarray(pvals, dtype=float)
    p = p[~np.isnan(p)]
    if p.size == 0:
        raise ValueError("no usable lambda for the occupation time")
    return float(np.mean(p < alpha))


def sup_pvalue(pvals) -> float:
    """Largest p-value over the non-NaN grid points."""
    p = np.asarray(pvals, dtype=float)
    p = p[~np.isnan(p)]
    if p.size == 0:
        raise ValueError("no usable lambda for the sup p-value")
    return float(np.max(p))


@dataclass(frozen=True)
class LambdaStar:
    lambda_star: float
    draw_seed: int
    index: int


def pick_lambda_star(grid: LambdaGrid, seed: int) -> LambdaStar:
    """Uniform draw of one grid point, fixed by ``seed``."""
    idx = int(RngStream(seed, purpose="lambda_star").generator().integers(grid.points))
    return LambdaStar(float(grid.values[idx]), int(seed), idx)


# --------------------------------------------------------------------------
# bundles and decisions


@dataclass
class PValueBundle:
    p_inf: np.ndarray
    p_star: BootPValueMatrix | None
    p_lf: np.ndarray | None
    p_ics1: np.ndarray | None
    ics: IcsDiagnostics


@dataclass
class TestDecision:
    """One test's outcome.

    ``value`` maps each nominal level to the quantity compared with it: the
    p-value (same at every level) or the occupation time at that level.
    """

    name: str
    kind: str
    statistic: float
    value: dict
    reject: dict

    __test__ = False


@dataclass
class DecisionSummary:
    decisions: dict
    fit: FitResult
    surface: TestSurface
    pvalues: PValueBundle
    lambda_star: LambdaStar
    errors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> TestDecision:
        return self.decisions[name]

    def to_records(self) -> list[dict]:
        """Flat rows: one per (test, level)."""
        rows = []
        for name, d in self.decisions.items():
            for a in LEVELS:
                rows.append({
                    "test": name, "kind": d.kind, "level": a,
                    "statistic": _clean(d.statistic), "value": _clean(d.value[a]),
                    "reject": bool(d.reject[a]),
                })
        return rows


def _clean(x):
    x = float(x)
    return None if np.isnan(x) else x


def _p_decision(name: str, stat: float, p: float) -> TestDecision:
    return TestDecision(name, "pvalue", float(stat), {a: float(p) for a in LEVELS},
                        {a: bool(p < a) for a in LEVELS})


def _pvot_decision(name: str, stat: float, pvals: np.ndarray) -> TestDecision:
    vals = {a: pvot(pvals, a) for a in LEVELS}
    return TestDecision(name, "pvot", float(stat), vals, {a: bool(vals[a] > a) for a in LEVELS})


@dataclass(frozen=True)
class RunConfig:
    """Everything :func:`run_all_tests` needs besides the data."""

    lambda_grid: LambdaGrid = LambdaGrid()
    hgrid: HGrid = HGrid()
    boot: BootConfig = BootConfig()
    fit: FitConfig = FitConfig()
    space: ParameterSpace | None = None
    kappa_a: float = 1.0
    lambda_seed: int = 0
    tests: tuple = TEST_NAMES

    def __post_init__(self):
        unknown = set(self.tests) - set(TEST_NAMES)
        if unknown:
            raise ValueError(f"unknown tests: {sorted(unknown)}")


def run_all_tests(spec: ModelSpec, sample: Sample, config: RunConfig = RunConfig()) -> DecisionSummary:
    """Fit, compute the statistic surface and return the requested decisions.

    Bootstraps are skipped when no requested test needs them. A failure in
    one bootstrap is recorded in ``errors`` and the tests that do not depend
    on it are still returned.
    """
    space = config.space if config.space is not None else ParameterSpace.star_default()
    wanted = set(config.tests)
    fr = fit(spec, sample, space, config.fit)
    comp = build_components(spec, sample, fr.theta_hat)
    surf = test_surface(spec, sample, fr.theta_hat, config.lambda_grid, components=comp)
    ics = ics_statistic(spec, sample, fr.theta_hat, a=config.kappa_a, components=comp)
    pinf = p_inf(surf)
    lam = pick_lambda_star(config.lambda_grid, config.lambda_seed)
    use = surf.usable
    T = surf.T
    errors: dict = {}
    out: dict = {}

    def stat_at(i):
        return T[i] if use[i] else np.nan

    if "rand_T" in wanted:
        out["rand_T"] = _p_decision("rand_T", stat_at(lam.index), pinf[lam.index])
    if "sup_p" in wanted:
        out["sup_p"] = _p_decision("sup_p", np.min(T[use]), sup_pvalue(pinf))
    if "pvot_chi2" in wanted:
        out["pvot_chi2"] = _pvot_decision("pvot_chi2", np.max(T[use]), pinf)

    if wanted & STRONG_BOOT_TESTS:
        try:
            sb = strong_id_bootstrap(spec, sample, fr, surf, config.boot)
            if "sup_T" in wanted:
                out["sup_T"] = _p_decision("sup_T", np.max(T[use]), sb.p_sup)
            if "ave_T" in wanted:
                out["ave_T"] = _p_decision("ave_T", np.mean(T[use]), sb.p_ave)
        except Exception as exc:  # keep the other tests
            errors["strong_bootstrap"] = f"{type(exc).__name__}: {exc}"

    p_star = p_lf = p_ics = None
    ics_only = wanted & ROBUST_TESTS <= {"rand_ICS1", "supP_ICS1", "pvot_ICS1"}
    if wanted & ROBUST_TESTS and ics_only and not ics.weak_selected:
        # the ICS p-value is the chi-squared one, so the bootstrap is not needed
        p_ics = np.where(use, pinf, np.nan)
        if "rand_ICS1" in wanted:
            out["rand_ICS1"] = _p_decision("rand_ICS1", stat_at(lam.index), p_ics[lam.index])
        if "supP_ICS1" in wanted:
            out["supP_ICS1"] = _p_decision("supP_ICS1", np.min(T[use]), sup_pvalue(p_ics))
        if "pvot_ICS1" in wanted:
            out["pvot_ICS1"] = _pvot_decision("pvot_ICS1", np.max(T[use]), p_ics)
    elif wanted & ROBUST_TESTS:
        try:
            p_star = robust_pvalues(spec, sample, fr, surf, config.hgrid, config.boot, space)
            p_lf = np.full(T.shape, np.nan)
            p_ics = np.full(T.shape, np.nan)
            for i in np.flatnonzero(use):
                p_lf[i] = lf_pvalue(p_star.p_star[i], pinf[i])
                p_ics[i] = ics1_pvalue(p_lf[i], pinf[i], ics)
            if "rand_LF" in wanted:
                out["rand_LF"] = _p_decision("rand_LF", stat_at(lam.index), p_lf[lam.index])
            if "rand_ICS1" in wanted:
                out["rand_ICS1"] = _p_decision("rand_ICS1", stat_at(lam.index), p_ics[lam.index])
            if "supP_LF" in wanted:
                out["supP_LF"] = _p_decision("supP_LF", np.min(T[use]), sup_pvalue(p_lf))
            if "supP_ICS1" in wanted:
                out["supP_ICS1"] = _p_decision("supP_ICS1", np.min(T[use]), sup_pvalue(p_ics))
            if "pvot_LF" in wanted:
                out["pvot_LF"] = _pvot_decision("pvot_LF", np.max(T[use]), p_lf)
            if "pvot_ICS1" in wanted:
                out["pvot_ICS1"] = _pvot_decision("pvot_ICS1", np.max(T[use]), p_ics)
        except Exception as exc:
            errors["robust_bootstrap"] = f"{type(exc).__name__}: {exc}"

    decisions = {name: out[name] for name in TEST_NAMES if name in out}
    bundle = PValueBundle(pinf, p_star, p_lf, p_ics, ics)
    return DecisionSummary(decisions, fr, surf, bundle, lam, errors)


__all__ = [
    "LEVELS",
    "TEST_NAMES",
    "DecisionSummary",
    "LambdaStar",
    "PValueBundle",
    "RunConfig",
    "TestDecision",
    "ics1_pvalue",
    "lf_pvalue",
    "p_inf",
    "pick_lambda_star",
    "pvot",
    "run_all_tests",
    "sup_pvalue",
]
