"""
Concentrated nonlinear least squares.

For fixed pi the criterion Q_n(psi, pi) = (1/2n) sum e_t^2 is quadratic in
psi = (beta, zeta), so psi_hat(pi) is an exact (possibly box-constrained)
least-squares solve. The transition parameter is found by minimizing the
profiled criterion Q_n(psi_hat(pi), pi) from many uniform starts at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .model import (
    ModelSpec,
    ParameterSpace,
    Sample,
    Theta,
    constrained_quadratic_min,
    g_batch,
    g_grad_batch,
    residual,
)
from .numerics import NearSingular, RngStream, batched_spd_inverse, solve_spd


class EstimationFailed(RuntimeError):
    """No start produced a usable least-squares fit."""


@dataclass(frozen=True)
class FitConfig:
    """Stopping rules and start design for :func:`fit`."""

    n_starts: int = 100
    criterion_tol: float = 1e-8
    max_iters: int = 20000
    start_seed: int = 0
    pi_grid_size: int = 64
    refine: bool = True

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.criterion_tol <= 0:
            raise ValueError("criterion_tol must be positive")


@dataclass(frozen=True)
class FitResult:
    theta_hat: Theta
    criterion: float
    sigma2_hat: float
    converged: bool
    starts_used: int
    best_start_index: int

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "criterion": self.criterion,
            "sigma2_hat": self.sigma2_hat,
            "converged": self.converged,
            "starts_used": self.starts_used,
            "best_start_index": self.best_start_index,
        }


def psi_hat_given_pi(spec: ModelSpec, sample: Sample, pi, space: ParameterSpace | None = None):
    """Least-squares psi = (beta, zeta) for a fixed pi.

    Without ``space`` this is plain OLS on the design [g(x_t, pi), x_t];
    with ``space`` the minimizer is restricted to {beta in B, zeta in Z(beta)}.

    Returns
    -------
    psi : ndarray, shape (k_beta + k_x,)
    criterion : float
        Q_n(psi, pi) = (1/2n) sum of squared residuals.
    """
    psi, q, ok = _profile(spec, sample, np.atleast_1d(np.asarray(pi, dtype=float))[None, :], space)
    if not ok[0]:
        D = np.hstack([g_batch(spec, sample.X, np.atleast_1d(pi))[0], sample.X])
        # re-raise with the pivot diagnostic
        solve_spd(D.T @ D / sample.n, D.T @ sample.y / sample.n, what="design cross-product")
    return psi[0], float(q[0])


def _profile(spec: ModelSpec, sample: Sample, pis: np.ndarray, space: ParameterSpace | None):
    """Profiled criterion at each row of ``pis``; returns (psi, Q, ok)."""
    y, X, n = sample.y, sample.X, sample.n
    G = g_batch(spec, X, pis)
    m = G.shape[0]
    D = np.concatenate([G, np.broadcast_to(X, (m,) + X.shape)], axis=2)
    A = np.einsum("mni,mnj->mij", D, D) / n
    c = np.einsum("mni,n->mi", D, y) / n
    inv, ok = batched_spd_inverse(A)
    psi = np.einsum("mij,mj->mi", np.nan_to_num(inv), c)
    if space is not None:
        Gc, hc = space.constraints
        # singular designs fail the rank check; only infeasible OLS points are projected
        bad = ok & ~space.contains_psi(psi)
        for i in np.flatnonzero(bad):
            try:
                psi[i] = constrained_quadratic_min(A[i], c[i], Gc, hc)
                ok[i] = True
            except np.linalg.LinAlgError:
                ok[i] = False
    eps = y[None, :] - np.einsum("mnk,mk->mn", D, psi)
    q = 0.5 * np.mean(eps**2, axis=1)
    q[~ok] = np.inf
    return psi, q, ok


def _profile_with_grad(spec, sample, pis, space):
    psi, q, ok = _profile(spec, sample, pis, space)
    eps = sample.y[None, :] - np.einsum(
        "mnk,mk->mn",
        np.concatenate([g_batch(spec, sample.X, pis), np.broadcast_to(sample.X, (pis.shape[0],) + sample.X.shape)], axis=2),
        psi,
    )
    dg = g_grad_batch(spec, sample.X, pis)
    beta = psi[:, : spec.k_beta]
    # envelope theorem: dQ/dpi = -(1/n) sum e_t beta' dg_t/dpi
    grad = -np.einsum("mn,mb,mnbp->mp", eps, beta, dg) / sample.n
    grad[~ok] = 0.0
    return psi, q, grad


def _descend(spec, sample, space, pi0, cfg: FitConfig):
    """Projected Barzilai-Borwein descent run in lockstep over all starts."""
    pi = space.clip_pi(np.asarray(pi0, dtype=float))
    psi, q, grad = _profile_with_grad(spec, sample, pi, space)
    m = pi.shape[0]
    width = float(np.max(space.pi_hi - space.pi_lo))
    alpha = 0.05 * width / np.maximum(np.linalg.norm(grad, axis=1), 1e-12)
    active = np.isfinite(q)
    converged = ~active.copy()
    iters = 0
    while active.any() and iters < cfg.max_iters:
        iters += 1
        idx = np.flatnonzero(active)
        trial = space.clip_pi(pi[idx] - alpha[idx, None] * grad[idx])
        step = trial - pi[idx]
        psi_t, q_t, g_t = _profile_with_grad(spec, sample, trial, space)
        decrease = -np.einsum("ip,ip->i", grad[idx], step)
        accept = q_t <= q[idx] - 1e-4 * decrease
        acc, rej = idx[accept], idx[~accept]
        if acc.size:
            s = step[accept]
            yv = g_t[accept] - grad[acc]
            sy = np.einsum("ip,ip->i", s, yv)
            ss = np.einsum("ip,ip->i", s, s)
            dq = q[acc] - q_t[accept]
            alpha[acc] = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), 2.0 * alpha[acc])
            alpha[acc] = np.clip(alpha[acc], 1e-12, 1e6)
            pi[acc], q[acc], grad[acc], psi[acc] = trial[accept], q_t[accept], g_t[accept], psi_t[accept]
            done = (dq < cfg.criterion_tol) | (ss < 1e-24)
            converged[acc[done]] = True
            active[acc[done]] = False
        if rej.size:
            alpha[rej] *= 0.25
            tiny = alpha[rej] * np.linalg.norm(grad[rej], axis=1) < 1e-14
            converged[rej[tiny]] = True
            active[rej[tiny]] = False
    return pi, psi, q, converged


def fit(spec: ModelSpec, sample: Sample, space: ParameterSpace, config: FitConfig = FitConfig()) -> FitResult:
    """Least-squares estimate of (zeta, beta, pi) over ``space``.

    Every start runs a projected quasi-Newton (Barzilai-Borwein) descent on
    the profiled criterion with an analytic envelope gradient. The best
    terminal point is then checked against a uniform pi grid and, for scalar
    pi, polished with a bounded Brent search.
    """
    sample.check(spec)
    rng = RngStream(config.start_seed, purpose="fit_starts").generator()
    starts = space.sample_pi(rng, config.n_starts)
    pi, psi, q, converged = _descend(spec, sample, space, starts, config)
    if not np.any(np.isfinite(q)):
        raise EstimationFailed("every start failed the rank check")
    qmin = np.min(q)
    best = int(np.flatnonzero(q <= qmin + 1e-12)[0])
    best_pi, best_psi, best_q, best_conv = pi[best].copy(), psi[best].copy(), float(q[best]), bool(converged[best])

    if spec.k_pi == 1 and config.pi_grid_size > 1:
        grid = np.linspace(space.pi_lo[0], space.pi_hi[0], config.pi_grid_size)[:, None]
        _, qg, _ = _profile(spec, sample, grid, space)
        j = int(np.argmin(qg))
        if qg[j] < best_q - config.criterion_tol:
            pg, psig, qg2, cg = _descend(spec, sample, space, grid[j : j + 1], config)
            if qg2[0] < best_q:
                best_pi, best_psi, best_q, best_conv = pg[0], psig[0], float(qg2[0]), bool(cg[0])

    if spec.k_pi == 1 and config.refine:
        half = float(space.pi_hi[0] - space.pi_lo[0]) / max(config.pi_grid_size, 2)
        lo = max(float(space.pi_lo[0]), float(best_pi[0]) - half)
        hi = min(float(space.pi_hi[0]), float(best_pi[0]) + half)
        if hi > lo:
            res = optimize.minimize_scalar(
                lambda p: float(_profile(spec, sample, np.array([[p]]), space)[1][0]),
                bounds=(lo, hi), method="bounded", options={"xatol": 1e-10},
            )
            if res.fun < best_q:
                best_pi = np.array([res.x])
                best_psi, qr, _ = _profile(spec, sample, best_pi[None, :], space)
                best_psi, best_q = best_psi[0], float(qr[0])

    theta = Theta.from_psi(best_psi, best_pi, spec.k_beta)
    return FitResult(
        theta_hat=theta,
        criterion=best_q,
        sigma2_hat=sigma2_hat(spec, sample, theta),
        converged=best_conv,
        starts_used=config.n_starts,
        best_start_index=best,
    )


def profile_grid_fit(spec: ModelSpec, sample: Sample, space: ParameterSpace | None, grid) -> FitResult:
    """Deterministic grid-search variant: best pi on ``grid`` with psi profiled out."""
    sample.check(spec)
    grid = np.asarray(grid, dtype=float).reshape(-1, spec.k_pi)
    psi, q, ok = _profile(spec, sample, grid, space)
    if not ok.any():
        raise EstimationFailed("every grid point failed the rank check")
    j = int(np.argmin(q))
    theta = Theta.from_psi(psi[j], grid[j], spec.k_beta)
    return FitResult(theta, float(q[j]), sigma2_hat(spec, sample, theta), True, grid.shape[0], j)


def sigma2_hat(spec: ModelSpec, sample: Sample, theta_hat: Theta) -> float:
    """Mean squared residual at ``theta_hat``."""
    e = residual(spec, theta_hat, sample)
    return float(np.mean(e**2))


__all__ = [
    "EstimationFailed",
    "FitConfig",
    "FitResult",
    "NearSingular",
    "fit",
    "profile_grid_fit",
    "psi_hat_given_pi",
    "sigma2_hat",
]
