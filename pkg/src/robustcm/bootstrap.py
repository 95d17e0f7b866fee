"""
Bootstrap p-values for the conditional-moment statistic.

Two procedures live here:

* :func:`robust_pvalues` simulates the weak-identification limit of T_n at
  every nuisance point h = (pi0, b). One Gaussian multiplier vector z is
  drawn per replication and shared by every (lambda, h) cell.
* :func:`strong_id_bootstrap` is a multiplier bootstrap of the strong
  identification limit, used for the sup and average statistics.

Everything that does not depend on z is tabulated once on the product of a
pi search grid, the lambda grid and the nuisance grid (:func:`step1_components`).
The per-draw work is then a handful of small tensor contractions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .cmtest import DEGENERATE_REL, LambdaGrid, TestSurface, build_components
from .model import (
    ModelSpec,
    ParameterSpace,
    Sample,
    Theta,
    g_batch,
    g_grad_batch,
    weight_matrix,
)
from .numerics import RngStream, batched_spd_inverse, gaussian_draws, solve_spd

TAU_TOL = 1e-12
MAX_REDRAWS = 10


class TauDegenerate(ArithmeticError):
    """The bootstrap direction tau has (numerically) zero length."""


class BootstrapDegenerate(RuntimeError):
    """No usable point is left on the pi search grid."""


@dataclass(frozen=True)
class NuisancePoint:
    pi0: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi0", np.atleast_1d(np.asarray(self.pi0, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))
        if not (np.all(np.isfinite(self.pi0)) and np.all(np.isfinite(self.b))):
            raise ValueError("nuisance point must be finite")


@dataclass(frozen=True)
class HGrid:
    """Cross product of pi0 values and b values.

    A scalar b value is broadcast to every coordinate when k_beta > 1.
    """

    pi0_values: tuple = tuple(np.round(np.arange(-2.0, 2.01, 0.5), 10))
    b_values: tuple = (-0.5, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.5)

    def __post_init__(self):
        if len(self.pi0_values) == 0 or len(self.b_values) == 0:
            raise ValueError("HGrid must be nonempty")
        object.__setattr__(self, "pi0_values", tuple(float(p) for p in np.ravel(self.pi0_values)))
        object.__setattr__(self, "b_values", tuple(self.b_values))

    def b_matrix(self, k_beta: int) -> np.ndarray:
        rows = []
        for b in self.b_values:
            arr = np.atleast_1d(np.asarray(b, dtype=float))
            rows.append(np.full(k_beta, arr[0]) if arr.size == 1 else arr)
        out = np.array(rows)
        if out.shape[1] != k_beta:
            raise ValueError("b values do not match k_beta")
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.pi0_values), len(self.b_values)

    def points(self, k_beta: int = 1) -> list[NuisancePoint]:
        """Nuisance points in row-major (pi0, b) order."""
        B = self.b_matrix(k_beta)
        return [NuisancePoint([p], b) for p, b in itertools.product(self.pi0_values, B)]


@dataclass(frozen=True)
class BootConfig:
    M: int = 500
    seed: int = 0
    pi_star_grid: int = 201
    replication: int = 0
    chunk: int = 32
    keep_draws: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.pi_star_grid < 2:
            raise ValueError("pi_star_grid must be >= 2")


@dataclass
class BootPValueMatrix:
    """Bootstrap p-values indexed by (lambda, h).

    Attributes
    ----------
    p_star : (L, n_h) array with entries in {0, 1/M, ..., 1}
    h_points : nuisance points matching the columns of ``p_star``
    draws_summary : optional (5, L, n_h) quantiles (5, 25, 50, 75, 95%) of T*
    draws_consumed : number of length-n Gaussian vectors used
    tau_redraws : draws replaced because tau was degenerate
    excluded_pi : pi grid points dropped for a singular Hessian
    """

    p_star: np.ndarray
    h_points: list
    M: int
    draws_summary: np.ndarray | None = None
    draws_consumed: int = 0
    tau_redraws: int = 0
    excluded_pi: int = 0
    T_star: np.ndarray | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# Step 1: tables that do not depend on the multiplier draw


@dataclass
class BootComponents:
    """Tabulated objects on (pi grid) x (lambda grid) x (nuisance grid).

    Shapes use P pi grid points, L lambdas, Q pi0 values, n observations.
    """

    spec: ModelSpec
    n: int
    pi_grid: np.ndarray          # (P,)
    lambdas: np.ndarray          # (L, k_x)
    pi0_values: np.ndarray       # (Q,)
    d_psi: np.ndarray            # (P, n, k_psi)
    H_psi: np.ndarray            # (P, k_psi, k_psi)
    H_psi_inv: np.ndarray        # (P, k_psi, k_psi), NaN where singular
    usable: np.ndarray           # (P,) bool
    D: np.ndarray                # (P, Q, k_psi, k_beta): -(1/n) sum d_psi(pi) g(pi0)'
    D_self: np.ndarray           # (P, k_psi, k_beta): -(1/n) sum d_psi(pi) g(pi)'
    F: np.ndarray                # (n, L)
    b_psi: np.ndarray            # (P, L, k_psi)
    coef: np.ndarray             # (P, L, k_psi): H_psi^{-1} b_psi
    K: np.ndarray                # (P, n, L)
    g_grid: np.ndarray           # (P, n, k_beta)
    g0: np.ndarray               # (Q, n, k_beta)
    KG0: np.ndarray              # (P, L, Q, k_beta): (1/n) sum K g(pi0)'
    KGs: np.ndarray              # (P, L, k_beta): (1/n) sum K g(pi)'
    eps_grid: np.ndarray         # (P, n): e_t(psi_hat, pi)
    v2_table: np.ndarray | None  # (P, L) when k_beta = 1 (sign of omega is irrelevant)
    gz: np.ndarray = field(repr=False, default=None)  # (P, n, k_beta, k_pi) dg/dpi

    @property
    def k_beta(self) -> int:
        return self.spec.k_beta

    def pi_index(self, pi) -> int:
        p = float(np.ravel(pi)[0])
        hit = np.flatnonzero(np.abs(self.pi_grid - p) <= 1e-12)
        if hit.size == 0:
            raise ValueError(f"pi = {p} is not on the search grid")
        return int(hit[0])

    def lambda_index(self, lam) -> int:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        hit = np.flatnonzero(np.all(np.abs(self.lambdas - lam[None, :]) <= 1e-12, axis=1))
        if hit.size == 0:
            raise ValueError("lambda is not on the grid")
        return int(hit[0])

    def pi0_index(self, pi0) -> int:
        p = float(np.ravel(pi0)[0])
        hit = np.flatnonzero(np.abs(self.pi0_values - p) <= 1e-12)
        if hit.size == 0:
            raise ValueError(f"pi0 = {p} is not on the nuisance grid")
        return int(hit[0])

    def v2(self, omega: np.ndarray, p: int) -> np.ndarray:
        """v_n^2(omega, pi_p, lambda) for every lambda, shape (L,)."""
        if self.v2_table is not None:
            return self.v2_table[p]
        return _v2_direct(self, omega, p)


def _v2_direct(comp: BootComponents, omega: np.ndarray, p: int) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    dth = np.concatenate(
        [comp.d_psi[p], np.einsum("b,nbk->nk", omega, comp.gz[p])], axis=1
    )
    H = dth.T @ dth / comp.n
    inv, ok = batched_spd_inverse(H[None])
    if not ok[0]:
        return np.full(comp.F.shape[1], np.nan)
    bth = comp.F.T @ dth / comp.n
    K = comp.F - dth @ (bth @ inv[0]).T
    return comp.eps_grid[p] ** 2 @ K**2 / comp.n


def step1_components(spec: ModelSpec, sample: Sample, theta_hat: Theta, pi_grid,
                     lambda_grid: LambdaGrid, hgrid: HGrid) -> BootComponents:
    """Tabulate every draw-independent object used by the robust bootstrap.

    Pi grid points whose H_psi fails the pivot test, or whose v_n^2 is
    degenerate on every lambda, are flagged unusable and skipped by the
    argmin in step 2.
    """
    X, y, n = sample.X, sample.y, sample.n
    kb = spec.k_beta
    pi_grid = np.asarray(pi_grid, dtype=float).ravel()
    P = pi_grid.size
    lambdas = lambda_grid.vectors(spec.k_x)
    pi0 = np.asarray(hgrid.pi0_values, dtype=float)

    G = g_batch(spec, X, pi_grid[:, None])                       # (P, n, kb)
    dpsi = np.concatenate([G, np.broadcast_to(X, (P,) + X.shape)], axis=2)
    H = np.einsum("pni,pnj->pij", dpsi, dpsi) / n
    Hinv, ok = batched_spd_inverse(H)
    g0 = g_batch(spec, X, pi0[:, None])                          # (Q, n, kb)
    D = -np.einsum("pni,qnb->pqib", dpsi, g0) / n
    D_self = -np.einsum("pni,pnb->pib", dpsi, G) / n
    F = weight_matrix(spec, X, lambdas)                          # (n, L)
    b_psi = np.einsum("nl,pni->pli", F, dpsi) / n
    coef = np.einsum("pij,plj->pli", np.nan_to_num(Hinv), b_psi)
    K = F[None, :, :] - np.einsum("pni,pli->pnl", dpsi, coef)
    KG0 = np.einsum("pnl,qnb->plqb", K, g0) / n
    KGs = np.einsum("pnl,pnb->plb", K, G) / n

    eps_grid = y[None, :] - X @ theta_hat.zeta - np.einsum("pnb,b->pn", G, theta_hat.beta)
    gz = g_grad_batch(spec, X, pi_grid[:, None])                 # (P, n, kb, kpi)

    comp = BootComponents(
        spec=spec, n=n, pi_grid=pi_grid, lambdas=lambdas, pi0_values=pi0,
        d_psi=dpsi, H_psi=H, H_psi_inv=Hinv, usable=ok.copy(), D=D, D_self=D_self,
        F=F, b_psi=b_psi, coef=coef, K=K, g_grid=G, g0=g0, KG0=KG0, KGs=KGs,
        eps_grid=eps_grid, v2_table=None, gz=gz,
    )
    if kb == 1:
        # with a single nonlinear term omega = +-1 and the projection span,
        # hence v_n^2, does not depend on the sign
        table = np.full((P, F.shape[1]), np.nan)
        for p in np.flatnonzero(ok):
            table[p] = _v2_direct(comp, np.ones(1), p)
        finite = np.isfinite(table).all(axis=1)
        top = np.max(table[finite]) if finite.any() else 0.0
        good = finite & np.all(table >= DEGENERATE_REL * top, axis=1) & (top > 0)
        comp.usable &= good
        comp.v2_table = table
    return comp


# --------------------------------------------------------------------------
# Steps 2-4 for a single draw


def _bootstrap_gradient(comp: BootComponents, z: np.ndarray) -> np.ndarray:
    """n^{-1/2} sum z_t d_psi,t(pi) on every grid point, shape (P, k_psi)."""
    return np.einsum("n,pni->pi", z, comp.d_psi) / np.sqrt(comp.n)


def _xi(comp: BootComponents, Gt: np.ndarray, sigma_hat: float, q: int, b: np.ndarray) -> np.ndarray:
    u = sigma_hat * Gt + comp.D[:, q] @ b
    xi = -0.5 * np.einsum("pi,pij,pj->p", u, np.nan_to_num(comp.H_psi_inv), u)
    return np.where(comp.usable, xi, np.inf), u


def step2_pi_star(comp: BootComponents, z, sigma_hat: float, h: NuisancePoint):
    """Bootstrap draw of the limiting argmin of the profiled criterion.

    Returns
    -------
    pi_star : float
        Grid argmin of xi*(pi, pi0, b); ties go to the smallest pi.
    index : int
        Position of ``pi_star`` on the search grid.
    """
    if not comp.usable.any():
        raise BootstrapDegenerate("every pi grid point is unusable")
    z = np.asarray(z, dtype=float)
    Gt = _bootstrap_gradient(comp, z)
    xi, _ = _xi(comp, Gt, sigma_hat, comp.pi0_index(h.pi0), h.b)
    p = int(np.argmin(xi))
    return float(comp.pi_grid[p]), p


def step3_z_star(comp: BootComponents, z, pi, lam) -> float:
    """n^{-1/2} sum z_t K_psi,t(pi, lambda) at a cached grid point."""
    p, l = comp.pi_index(pi), comp.lambda_index(lam)
    return float(np.asarray(z, dtype=float) @ comp.K[p, :, l] / np.sqrt(comp.n))


def step4_T_star(comp: BootComponents, z, sigma_hat: float, psi_hat, h: NuisancePoint, lam,
                 return_terms: bool = False):
    """One bootstrap draw of the limiting statistic at nuisance point ``h``.

    ``psi_hat`` enters only through the residuals tabulated in step 1 and is
    accepted for interface symmetry.

    Raises
    ------
    TauDegenerate
        If the bootstrap direction tau is numerically zero.
    """
    z = np.asarray(z, dtype=float)
    kb = comp.k_beta
    pi_star, p = step2_pi_star(comp, z, sigma_hat, h)
    q, l = comp.pi0_index(h.pi0), comp.lambda_index(lam)
    b = h.b
    Gt = _bootstrap_gradient(comp, z)
    u = sigma_hat * Gt[p] + comp.D[p, q] @ b
    tau = -(comp.H_psi_inv[p] @ u)[:kb]
    norm = np.linalg.norm(tau)
    if norm < TAU_TOL:
        raise TauDegenerate(f"|tau| = {norm:.3e}")
    omega = tau / norm

    z_star = float(z @ comp.K[p, :, l] / np.sqrt(comp.n))
    c = comp.coef[p, l]
    bpsi = comp.b_psi[p, l]
    t1 = sigma_hat * z_star
    t2 = float(c @ (comp.D[p, q] @ b) + bpsi[:kb] @ b)
    t3 = float(c @ ((-comp.D[p, q] + comp.D_self[p]) @ b))
    t4 = float((comp.KG0[p, l, q] - comp.KGs[p, l]) @ b)
    v2 = float(comp.v2(omega, p)[l])
    T = (t1 + t2 + t3 + t4) ** 2 / v2
    if return_terms:
        return T, {"pi_star": pi_star, "omega": omega, "terms": (t1, t2, t3, t4), "v2": v2}
    return T


# --------------------------------------------------------------------------
# Step 5: vectorized over draws, nuisance points and lambdas


def _draw_block(comp: BootComponents, Z: np.ndarray, sigma_hat: float, Bmat: np.ndarray):
    """T* for a block of draws: returns (T (J, Q, B, L), tau_norm (J, Q, B))."""
    n, kb = comp.n, comp.k_beta
    J = Z.shape[0]
    Gt = np.einsum("jn,pni->jpi", Z, comp.d_psi) / np.sqrt(n)           # (J, P, kpsi)
    Db = np.einsum("pqib,cb->pqci", comp.D, Bmat)                        # (P, Q, B, kpsi)
    u = sigma_hat * Gt[:, :, None, None, :] + Db[None]                   # (J, P, Q, B, kpsi)
    Hinv = np.nan_to_num(comp.H_psi_inv)
    Hu = np.einsum("pik,jpqck->jpqci", Hinv, u)
    xi = -0.5 * np.einsum("jpqci,jpqci->jpqc", u, Hu)
    xi[:, ~comp.usable] = np.inf
    pstar = np.argmin(xi, axis=1)                                       # (J, Q, B), first = smallest pi

    jj, qq, cc = np.meshgrid(np.arange(J), np.arange(comp.D.shape[1]), np.arange(Bmat.shape[0]), indexing="ij")
    Hu_star = Hu[jj, pstar, qq, cc]                                      # (J, Q, B, kpsi)
    tau = -Hu_star[..., :kb]
    tau_norm = np.linalg.norm(tau, axis=-1)

    zF = Z @ comp.F / np.sqrt(n)                                         # (J, L)
    c = comp.coef[pstar]                                                 # (J, Q, B, L, kpsi)
    Gs = Gt[jj, pstar]                                                   # (J, Q, B, kpsi)
    z_star = zF[:, None, None, :] - np.einsum("jqcli,jqci->jqcl", c, Gs)
    Db_star = Db[pstar, qq, cc]                                          # (J, Q, B, kpsi)
    bpsi = comp.b_psi[pstar]                                             # (J, Q, B, L, kpsi)
    t2 = np.einsum("jqcli,jqci->jqcl", c, Db_star) + np.einsum("jqclb,cb->jqcl", bpsi[..., :kb], Bmat)
    Dself_b = np.einsum("jqcib,cb->jqci", comp.D_self[pstar], Bmat)
    t3 = np.einsum("jqcli,jqci->jqcl", c, Dself_b - Db_star)
    KG0 = comp.KG0[pstar, :, qq]                                         # (J, Q, B, L, kb)
    KGs = comp.KGs[pstar]                                                # (J, Q, B, L, kb)
    t4 = np.einsum("jqclb,cb->jqcl", KG0 - KGs, Bmat)
    num = sigma_hat * z_star + t2 + t3 + t4

    if comp.v2_table is not None:
        v2 = comp.v2_table[pstar]                                        # (J, Q, B, L)
    else:
        v2 = np.empty_like(num)
        omega = tau / np.where(tau_norm > 0, tau_norm, 1.0)[..., None]
        for idx in np.ndindex(*pstar.shape):
            v2[idx] = comp.v2(omega[idx], int(pstar[idx]))
    return num**2 / v2, tau_norm


def robust_pvalues(spec: ModelSpec, sample: Sample, fit, surface: TestSurface,
                   hgrid: HGrid = HGrid(), config: BootConfig = BootConfig(),
                   space: ParameterSpace | None = None) -> BootPValueMatrix:
    """Weak-identification bootstrap p-values p*(lambda, h).

    Parameters
    ----------
    fit : FitResult
        Supplies theta_hat and sigma_hat = sqrt(sigma2_hat).
    surface : TestSurface
        The sample statistic T_n(lambda) that draws are compared with.
    space : ParameterSpace, optional
        Supplies the pi range searched by step 2; defaults to [-2, 2].
    """
    pi_lo, pi_hi = (-2.0, 2.0) if space is None else (float(space.pi_lo[0]), float(space.pi_hi[0]))
    pi_grid = np.linspace(pi_lo, pi_hi, config.pi_star_grid)
    comp = step1_components(spec, sample, fit.theta_hat, pi_grid, surface.lambda_grid, hgrid)
    if not comp.usable.any():
        raise BootstrapDegenerate("every pi grid point is unusable")
    sigma_hat = float(np.sqrt(fit.sigma2_hat))
    Bmat = hgrid.b_matrix(spec.k_beta)
    Q, Bn = hgrid.shape
    L = surface.T.size
    n = sample.n
    exceed = np.zeros((L, Q * Bn), dtype=np.int64)
    keep = [] if config.keep_draws else None
    consumed = redraws = 0
    base = RngStream(config.seed, replication=config.replication, purpose="robust_bootstrap")

    for start in range(0, config.M, config.chunk):
        js = range(start, min(start + config.chunk, config.M))
        subs = {j: 0 for j in js}
        Z = np.stack([gaussian_draws(base.child(draw=j), n) for j in js])
        consumed += len(js)
        T, tn = _draw_block(comp, Z, sigma_hat, Bmat)
        bad = np.flatnonzero(np.any(tn < TAU_TOL, axis=(1, 2)))
        while bad.size:
            for i in bad:
                j = js[i]
                subs[j] += 1
                if subs[j] > MAX_REDRAWS:
                    raise TauDegenerate(f"draw {j}: tau degenerate after {MAX_REDRAWS} redraws")
                Z[i] = gaussian_draws(base.child(draw=j, sub=subs[j]), n)
                consumed += 1
                redraws += 1
            Tb, tnb = _draw_block(comp, Z[bad], sigma_hat, Bmat)
            T[bad], tn[bad] = Tb, tnb
            bad = bad[np.any(tnb < TAU_TOL, axis=(1, 2))]
        flat = T.reshape(T.shape[0], Q * Bn, L).transpose(0, 2, 1)      # (J, L, H)
        exceed += np.sum(flat > surface.T[None, :, None], axis=0)
        if keep is not None:
            keep.append(flat)

    summary = T_all = None
    if keep is not None:
        T_all = np.concatenate(keep, axis=0)
        summary = np.quantile(T_all, [0.05, 0.25, 0.5, 0.75, 0.95], axis=0)
    return BootPValueMatrix(
        p_star=exceed / config.M,
        h_points=hgrid.points(spec.k_beta),
        M=config.M,
        draws_summary=summary,
        draws_consumed=consumed,
        tau_redraws=redraws,
        excluded_pi=int(np.sum(~comp.usable)),
        T_star=T_all,
    )


# --------------------------------------------------------------------------
# strong-identification multiplier bootstrap


@dataclass
class StrongBootResult:
    T_star: np.ndarray      # (M, L)
    sup_star: np.ndarray    # (M,)
    ave_star: np.ndarray    # (M,)
    p_sup: float
    p_ave: float


def strong_id_bootstrap(spec: ModelSpec, sample: Sample, fit, surface: TestSurface,
                        config: BootConfig = BootConfig(), Z: np.ndarray | None = None) -> StrongBootResult:
    """Multiplier bootstrap of T_n under strong identification.

    Draw j uses T*_j(lambda) = (n^{-1/2} sum z_jt e_t K_theta,t(lambda))^2 / v_n^2(lambda).
    ``Z`` may supply the (M, n) multipliers directly; otherwise they come from
    the seeded streams.
    """
    n = sample.n
    comp = build_components(spec, sample, fit.theta_hat)
    lambdas = surface.lambda_grid.vectors(spec.k_x)
    F = weight_matrix(spec, sample.X, lambdas)
    b = F.T @ comp.d_theta / n
    coef = solve_spd(comp.H_hat, b.T, what="H_hat").T
    K = F - comp.d_theta @ coef.T                                     # (n, L)
    if Z is None:
        base = RngStream(config.seed, replication=config.replication, purpose="strong_bootstrap")
        Z = np.stack([gaussian_draws(base.child(draw=j), n) for j in range(config.M)])
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    use = surface.usable
    num = (Z * comp.eps[None, :]) @ K / np.sqrt(n)                    # (M, L)
    v2 = np.where(use, surface.v2, 1.0)
    T = np.where(use[None, :], num**2 / v2[None, :], 0.0)
    sup_star = T[:, use].max(axis=1)
    ave_star = T[:, use].mean(axis=1)
    sup_n = surface.T[use].max()
    ave_n = surface.T[use].mean()
    M = Z.shape[0]
    return StrongBootResult(T, sup_star, ave_star,
                            float(np.sum(sup_star > sup_n)) / M,
                            float(np.sum(ave_star > ave_n)) / M)


__all__ = [
    "BootComponents",
    "BootConfig",
    "BootPValueMatrix",
    "BootstrapDegenerate",
    "HGrid",
    "NuisancePoint",
    "StrongBootResult",
    "TauDegenerate",
    "robust_pvalues",
    "step1_components",
    "step2_pi_star",
    "step3_z_star",
    "step4_T_star",
    "strong_id_bootstrap",
]
