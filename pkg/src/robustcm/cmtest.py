"""
Conditional-moment test statistic and identification-category diagnostic.

For a fitted model the statistic at weight index lambda is

    T_n(lambda) = (n^{-1/2} sum e_t F_t(lambda))^2 / v_n^2(lambda),

where F_t(lambda) = F(lambda' W(x_t)) and v_n^2 is the residual-weighted
variance of F_t after projecting out the estimation gradient d_theta,t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (
    ModelSpec,
    Sample,
    Theta,
    d_theta_matrix,
    omega_of_beta,
    residual,
    weight_matrix,
)
from .numerics import NearSingular, solve_spd

DEGENERATE_REL = 1e-10
ABS_RESID_TOL = 1e-12


class DegenerateScale(ArithmeticError):
    """Every lambda on the grid has a numerically zero variance estimate."""


@dataclass(frozen=True)
class LambdaGrid:
    """Equally spaced scalar grid on [lo, hi], endpoints included.

    With ``k_x > 1`` each grid value s maps to the vector s * direction.
    """

    lo: float = 1.0
    hi: float = 5.0
    points: int = 25
    direction: tuple | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("LambdaGrid needs lo < hi")
        if self.points < 2:
            raise ValueError("LambdaGrid needs at least 2 points")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)

    def vectors(self, k_x: int) -> np.ndarray:
        """Lambda vectors, shape (points, k_x)."""
        d = np.ones(k_x) if self.direction is None else np.asarray(self.direction, dtype=float)
        if d.size != k_x:
            raise ValueError(f"direction has length {d.size}, expected {k_x}")
        return self.values[:, None] * d[None, :]


@dataclass(frozen=True)
class TestSurface:
    lambda_grid: LambdaGrid
    numerator: np.ndarray
    v2: np.ndarray
    T: np.ndarray
    degenerate_mask: np.ndarray

    __test__ = False  # not a pytest class

    @property
    def usable(self) -> np.ndarray:
        return ~self.degenerate_mask


@dataclass(frozen=True)
class IcsDiagnostics:
    A_n: float
    kappa_n: float
    Sigma_hat: np.ndarray
    weak_selected: bool


@dataclass(frozen=True)
class Components:
    """Cached pieces shared by every lambda.

    Attributes
    ----------
    H_hat, V_hat, Sigma_hat : (k_theta, k_theta) arrays
    d_theta : (n, k_theta) gradient rows at (omega(beta_hat), pi_hat)
    eps : (n,) residuals at theta_hat
    b_theta : callable
        ``b_theta(lambdas) -> (L, k_theta)``, the sample mean of F_t d_theta,t.
    """

    H_hat: np.ndarray
    V_hat: np.ndarray
    Sigma_hat: np.ndarray
    d_theta: np.ndarray
    eps: np.ndarray
    b_theta: Callable = field(repr=False)

    def __iter__(self):
        return iter((self.H_hat, self.V_hat, self.Sigma_hat, self.b_theta, self.d_theta))


def build_components(spec: ModelSpec, sample: Sample, theta_hat: Theta) -> Components:
    """Hessian, outer-product and sandwich estimates at ``theta_hat``.

    Raises
    ------
    NearSingular
        If H_hat fails the pivot test.
    """
    n, X = sample.n, sample.X
    omega = omega_of_beta(theta_hat.beta)
    d = d_theta_matrix(spec, X, omega, theta_hat.pi)
    eps = residual(spec, theta_hat, sample)
    H = d.T @ d / n
    V = (d * (eps**2)[:, None]).T @ d / n
    H = 0.5 * (H + H.T)
    V = 0.5 * (V + V.T)
    Hinv_V = solve_spd(H, V, what="H_hat")
    Sigma = solve_spd(H, Hinv_V.T, what="H_hat")
    Sigma = 0.5 * (Sigma + Sigma.T)

    def b_theta(lambdas):
        F = weight_matrix(spec, X, lambdas)
        return F.T @ d / n

    return Components(H, V, Sigma, d, eps, b_theta)


def _projection_coefficients(H: np.ndarray, B: np.ndarray, fast: bool) -> np.ndarray:
    """Rows of H^{-1} b for each row b of ``B``."""
    if fast and H.shape[0] == 3:
        # closed-form 3x3 inverse through the adjugate
        a, b, c = H[0]
        _, e, f = H[1]
        i = H[2, 2]
        A = e * i - f * f
        Bc = c * f - b * i
        C = b * f - c * e
        E = a * i - c * c
        Fc = b * c - a * f
        I = a * e - b * b
        det = a * A + b * Bc + c * C
        adj = np.array([[A, Bc, C], [Bc, E, Fc], [C, Fc, I]])
        return B @ (adj / det)
    return solve_spd(H, B.T, what="H_hat").T


def test_surface(spec: ModelSpec, sample: Sample, theta_hat: Theta, grid: LambdaGrid,
                 components: Components | None = None, fast: bool = True) -> TestSurface:
    """Statistic T_n(lambda) on every grid point.

    Parameters
    ----------
    fast : bool
        Use the closed-form 3x3 inverse when k_theta = 3 (scalar regressor).
        ``fast=False`` forces the Cholesky path; both agree to roundoff.

    Raises
    ------
    DegenerateScale
        If v_n^2 is numerically zero on the whole grid.
    """
    comp = components if components is not None else build_components(spec, sample, theta_hat)
    n = sample.n
    lambdas = grid.vectors(spec.k_x)
    F = weight_matrix(spec, sample.X, lambdas)
    b = F.T @ comp.d_theta / n
    c = _projection_coefficients(comp.H_hat, b, fast)
    K = F - comp.d_theta @ c.T
    eps2 = comp.eps**2
    v2 = eps2 @ (K**2) / n
    num = comp.eps @ F / np.sqrt(n)
    # relative cut across the grid, plus an absolute floor so roundoff residuals of an exact fit count as zero
    floor = (ABS_RESID_TOL * (1.0 + np.max(np.abs(sample.y)))) ** 2
    degenerate = ~(v2 >= DEGENERATE_REL * np.max(v2)) | (v2 <= floor)
    if np.all(degenerate):
        raise DegenerateScale("v_n^2 is numerically zero for every lambda")
    T = np.where(degenerate, 0.0, num**2 / np.where(degenerate, 1.0, v2))
    return TestSurface(grid, num, v2, T, degenerate)


test_surface.__test__ = False  # keep pytest from collecting the import


def kappa(n: int, a: float = 1.0) -> float:
    """Threshold a * ln(ln n)."""
    if n < 3:
        raise ValueError("kappa_n needs n >= 3")
    return float(a * np.log(np.log(n)))


def ics_from_sigma(beta_hat, Sigma_bb, n: int, a: float = 1.0) -> IcsDiagnostics:
    """A_n = sqrt(n beta' Sigma_bb^{-1} beta / k_beta) compared with kappa_n."""
    beta_hat = np.atleast_1d(np.asarray(beta_hat, dtype=float))
    Sigma_bb = np.atleast_2d(np.asarray(Sigma_bb, dtype=float))
    quad = float(beta_hat @ solve_spd(Sigma_bb, beta_hat, what="Sigma_beta_beta"))
    A = float(np.sqrt(max(n * quad / beta_hat.size, 0.0)))
    k = kappa(n, a)
    return IcsDiagnostics(A, k, Sigma_bb, A <= k)


def ics_statistic(spec: ModelSpec, sample: Sample, theta_hat: Theta, n: int | None = None,
                  a: float = 1.0, components: Components | None = None) -> IcsDiagnostics:
    """Identification-category statistic at ``theta_hat``.

    ``Sigma_hat`` in the result is the full sandwich; the statistic uses its
    leading k_beta block.
    """
    n = sample.n if n is None else n
    comp = components if components is not None else build_components(spec, sample, theta_hat)
    kb = spec.k_beta
    out = ics_from_sigma(theta_hat.beta, comp.Sigma_hat[:kb, :kb], n, a)
    return IcsDiagnostics(out.A_n, out.kappa_n, comp.Sigma_hat, out.weak_selected)


__all__ = [
    "Components",
    "DegenerateScale",
    "IcsDiagnostics",
    "LambdaGrid",
    "NearSingular",
    "TestSurface",
    "build_components",
    "ics_from_sigma",
    "ics_statistic",
    "kappa",
    "test_surface",
]
