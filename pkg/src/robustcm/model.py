"""
Additively nonlinear regression family

    y_t = zeta' x_t + beta' g(x_t, pi) + e_t

with a logistic smooth-transition response g(x, pi) = x * h(z, pi), where
h(z, pi) = 1 / (1 + exp(-speed * (z - pi))) and the speed is fixed. A custom
response can be supplied through callables.

All "matrix" helpers evaluate every observation at once; the per-row functions
(``g_eval``, ``d_psi``, ...) are thin wrappers kept for clarity and testing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

EXP_CLAMP = 700.0


@dataclass(frozen=True)
class ModelSpec:
    """Model configuration.

    Parameters
    ----------
    k_x : int
        Number of regressors (columns of ``X``).
    k_beta : int, optional
        Number of nonlinear terms. Must equal ``k_x`` for the logistic
        response; defaults to ``k_x``.
    k_pi : int
        Number of transition parameters (1 for the logistic response).
    response : {"logistic_star", "custom"}
    speed : float
        Fixed transition speed for the logistic response.
    include_constant : bool
        Whether column 0 of ``X`` is a constant. The constant is left
        untouched by the bounded transform of the test weight.
    transition_index : int, optional
        Column of ``X`` holding the transition variable. Defaults to the
        first stochastic regressor.
    g_func, g_grad_func : callable, optional
        For ``response="custom"``: ``g_func(X, pi) -> (n, k_beta)`` and
        ``g_grad_func(X, pi) -> (n, k_beta, k_pi)``.
    """

    k_x: int
    k_beta: Optional[int] = None
    k_pi: int = 1
    response: str = "logistic_star"
    speed: float = 10.0
    include_constant: bool = False
    transition_index: Optional[int] = None
    g_func: Optional[Callable] = field(default=None, compare=False, repr=False)
    g_grad_func: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.k_beta is None:
            object.__setattr__(self, "k_beta", self.k_x)
        if self.k_x < 1 or self.k_beta < 1 or self.k_pi < 1:
            raise ValueError("k_x, k_beta and k_pi must all be >= 1")
        if self.response == "logistic_star":
            if self.speed <= 0:
                raise ValueError("speed must be positive")
            if self.k_beta != self.k_x or self.k_pi != 1:
                raise ValueError("logistic_star requires k_beta == k_x and k_pi == 1")
            if self.include_constant and self.k_x < 2:
                raise ValueError("a constant-only design has no transition variable")
        elif self.response == "custom":
            if self.g_func is None or self.g_grad_func is None:
                raise ValueError("custom response needs g_func and g_grad_func")
        else:
            raise ValueError(f"unknown response kind {self.response!r}")

    @property
    def k_psi(self) -> int:
        return self.k_beta + self.k_x

    @property
    def k_theta(self) -> int:
        return self.k_beta + self.k_x + self.k_pi

    @property
    def z_index(self) -> int:
        if self.transition_index is not None:
            return self.transition_index
        return 1 if self.include_constant else 0


@dataclass(frozen=True)
class Theta:
    """Parameter point (zeta, beta, pi)."""

    zeta: np.ndarray
    beta: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        for name in ("zeta", "beta", "pi"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    @property
    def psi(self) -> np.ndarray:
        """(beta, zeta), the order matching ``d_psi``."""
        return np.concatenate([self.beta, self.zeta])

    @classmethod
    def from_psi(cls, psi, pi, k_beta: int) -> "Theta":
        psi = np.asarray(psi, dtype=float)
        return cls(zeta=psi[k_beta:], beta=psi[:k_beta], pi=pi)

    def to_dict(self) -> dict:
        return {"zeta": self.zeta.tolist(), "beta": self.beta.tolist(), "pi": self.pi.tolist()}


@dataclass(frozen=True)
class Sample:
    """Observed data: ``y`` of length n and regressors ``X`` of shape (n, k_x)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise ValueError("y and X have different numbers of rows")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("sample contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def check(self, spec: ModelSpec) -> "Sample":
        if self.X.shape[1] != spec.k_x:
            raise ValueError(f"X has {self.X.shape[1]} columns, model expects {spec.k_x}")
        if self.n < spec.k_x + spec.k_beta + spec.k_pi + 2:
            raise ValueError(f"sample of size {self.n} is too small for this model")
        return self


class ParameterSpace:
    """Estimation space {beta in B, zeta in Z(beta), pi in Pi}.

    ``zeta_box_fn`` maps beta to ``(lo, hi)`` arrays for zeta. The bounds must
    be affine in beta; this is verified on construction so the space can be
    written as linear inequalities on psi = (beta, zeta).
    """

    def __init__(self, beta_box, zeta_box_fn, pi_box):
        self.beta_lo, self.beta_hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in beta_box)
        self.pi_lo, self.pi_hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in pi_box)
        self.zeta_box_fn = zeta_box_fn
        if np.any(self.beta_lo > self.beta_hi) or np.any(self.pi_lo > self.pi_hi):
            raise ValueError("empty box")
        self._G, self._h = self._linearize()

    @property
    def k_beta(self) -> int:
        return self.beta_lo.size

    @property
    def k_pi(self) -> int:
        return self.pi_lo.size

    def zeta_box(self, beta):
        lo, hi = self.zeta_box_fn(np.atleast_1d(np.asarray(beta, dtype=float)))
        return np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))

    def _linearize(self):
        kb = self.k_beta
        lo0, hi0 = self.zeta_box(np.zeros(kb))
        kx = lo0.size
        dlo = np.empty((kx, kb))
        dhi = np.empty((kx, kb))
        for j in range(kb):
            e = np.zeros(kb)
            e[j] = 1.0
            lo1, hi1 = self.zeta_box(e)
            dlo[:, j] = lo1 - lo0
            dhi[:, j] = hi1 - hi0
        probe = np.linspace(-0.37, 0.53, kb)
        lo_p, hi_p = self.zeta_box(probe)
        if not (np.allclose(lo_p, lo0 + dlo @ probe) and np.allclose(hi_p, hi0 + dhi @ probe)):
            raise ValueError("zeta bounds must be affine in beta")
        mid = 0.5 * (self.beta_lo + self.beta_hi)
        lo_m, hi_m = self.zeta_box(mid)
        if np.any(lo_m > hi_m):
            raise ValueError("Z(beta) is empty")
        # psi = (beta, zeta); rows encode G psi <= h
        I_b, I_z = np.eye(kb), np.eye(kx)
        rows = [
            (np.hstack([I_b, np.zeros((kb, kx))]), self.beta_hi),
            (np.hstack([-I_b, np.zeros((kb, kx))]), -self.beta_lo),
            (np.hstack([-dhi, I_z]), hi0),
            (np.hstack([dlo, -I_z]), -lo0),
        ]
        G = np.vstack([r[0] for r in rows])
        h = np.concatenate([r[1] for r in rows])
        keep = np.isfinite(h)
        return G[keep], h[keep]

    @property
    def constraints(self):
        """Linear form ``(G, h)`` with the space equal to {psi : G psi <= h}."""
        return self._G, self._h

    def contains_psi(self, psi, tol: float = 1e-12) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        return np.all(psi @ self._G.T <= self._h + tol, axis=-1)

    def contains(self, theta: Theta, tol: float = 1e-12) -> bool:
        ok_pi = np.all(theta.pi >= self.pi_lo - tol) and np.all(theta.pi <= self.pi_hi + tol)
        return bool(ok_pi and self.contains_psi(theta.psi, tol))

    def clip_pi(self, pi):
        return np.clip(pi, self.pi_lo, self.pi_hi)

    def sample_pi(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.pi_lo, self.pi_hi, size=(count, self.k_pi))

    @classmethod
    def star_default(cls, iota: float = 1e-10, pi_box=(-2.0, 2.0)) -> "ParameterSpace":
        """Scalar STAR space B = [-1+iota, 1-iota], Z(beta) = [-1-beta, 1-beta]."""
        return cls(
            beta_box=(-1.0 + iota, 1.0 - iota),
            zeta_box_fn=lambda b: (-1.0 - b, 1.0 - b),
            pi_box=pi_box,
        )

    @classmethod
    def wide(cls, k_x: int, k_beta: int, pi_box=(-2.0, 2.0), bound: float = 1e3) -> "ParameterSpace":
        lo, hi = np.atleast_1d(pi_box[0]).astype(float), np.atleast_1d(pi_box[1]).astype(float)
        return cls(
            beta_box=(np.full(k_beta, -bound), np.full(k_beta, bound)),
            zeta_box_fn=lambda b: (np.full(k_x, -bound), np.full(k_x, bound)),
            pi_box=(lo, hi),
        )


# --------------------------------------------------------------------------
# response and derivatives


def logistic(u):
    """1 / (1 + exp(-u)) with the exponent clamped to avoid overflow."""
    return 1.0 / (1.0 + np.exp(-np.clip(u, -EXP_CLAMP, EXP_CLAMP)))


def _transition(spec: ModelSpec, X: np.ndarray, pi) -> np.ndarray:
    z = X[:, spec.z_index]
    return logistic(spec.speed * (z - float(np.asarray(pi).ravel()[0])))


def g_matrix(spec: ModelSpec, X: np.ndarray, pi) -> np.ndarray:
    """g(x_t, pi) for every row: shape (n, k_beta)."""
    if spec.response == "custom":
        return np.asarray(spec.g_func(X, np.atleast_1d(pi)), dtype=float).reshape(X.shape[0], spec.k_beta)
    return X * _transition(spec, X, pi)[:, None]


def g_grad_matrix(spec: ModelSpec, X: np.ndarray, pi) -> np.ndarray:
    """dg/dpi for every row: shape (n, k_beta, k_pi)."""
    if spec.response == "custom":
        out = np.asarray(spec.g_grad_func(X, np.atleast_1d(pi)), dtype=float)
        return out.reshape(X.shape[0], spec.k_beta, spec.k_pi)
    h = _transition(spec, X, pi)
    dh = -spec.speed * h * (1.0 - h)
    return (X * dh[:, None])[:, :, None]


def g_batch(spec: ModelSpec, X: np.ndarray, pis: np.ndarray) -> np.ndarray:
    """g evaluated at many pi values: ``pis`` (m, k_pi) -> (m, n, k_beta)."""
    pis = np.asarray(pis, dtype=float).reshape(-1, spec.k_pi)
    if spec.response == "custom":
        return np.stack([g_matrix(spec, X, p) for p in pis])
    z = X[:, spec.z_index]
    h = logistic(spec.speed * (z[None, :] - pis[:, :1]))
    return X[None, :, :] * h[:, :, None]


def g_grad_batch(spec: ModelSpec, X: np.ndarray, pis: np.ndarray) -> np.ndarray:
    """dg/dpi at many pi values: (m, n, k_beta, k_pi)."""
    pis = np.asarray(pis, dtype=float).reshape(-1, spec.k_pi)
    if spec.response == "custom":
        return np.stack([g_grad_matrix(spec, X, p) for p in pis])
    z = X[:, spec.z_index]
    h = logistic(spec.speed * (z[None, :] - pis[:, :1]))
    dh = -spec.speed * h * (1.0 - h)
    return (X[None, :, :] * dh[:, :, None])[..., None]


def g_eval(spec: ModelSpec, x_row, pi) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x_row, dtype=float))[None, :]
    return g_matrix(spec, x, pi)[0]


def g_grad_pi(spec: ModelSpec, x_row, pi) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x_row, dtype=float))[None, :]
    return g_grad_matrix(spec, x, pi)[0]


def residual(spec: ModelSpec, theta: Theta, sample: Sample) -> np.ndarray:
    """e_t(theta) = y_t - zeta'x_t - beta'g(x_t, pi)."""
    return sample.y - sample.X @ theta.zeta - g_matrix(spec, sample.X, theta.pi) @ theta.beta


def omega_of_beta(beta) -> np.ndarray:
    """beta / ||beta||, or the normalized ones vector when beta = 0."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    norm = np.linalg.norm(beta)
    if norm > 0:
        return beta / norm
    return np.ones_like(beta) / np.sqrt(beta.size)


def d_psi_matrix(spec: ModelSpec, X: np.ndarray, pi) -> np.ndarray:
    """Rows [g(x_t, pi)', x_t']: shape (n, k_beta + k_x)."""
    return np.hstack([g_matrix(spec, X, pi), X])


def d_theta_matrix(spec: ModelSpec, X: np.ndarray, omega, pi) -> np.ndarray:
    """Rows [g', x', omega' dg/dpi]: shape (n, k_theta)."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
        raise ValueError("omega must have unit norm")
    grad = g_grad_matrix(spec, X, pi)
    return np.hstack([g_matrix(spec, X, pi), X, np.einsum("b,nbp->np", omega, grad)])


def d_psi(spec: ModelSpec, x_row, pi) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x_row, dtype=float))[None, :]
    return d_psi_matrix(spec, x, pi)[0]


def d_theta(spec: ModelSpec, x_row, omega, pi) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x_row, dtype=float))[None, :]
    return d_theta_matrix(spec, x, omega, pi)[0]


# --------------------------------------------------------------------------
# test weight F(lambda' W(x))


def bounded_transform(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    """arctan applied to each stochastic regressor; a constant column passes through."""
    W = np.arctan(X)
    if spec.include_constant:
        W[:, 0] = X[:, 0]
    return W


def weight_logistic(u):
    """F(u) = 1 / (1 + exp(u))."""
    return 1.0 / (1.0 + np.exp(np.clip(u, -EXP_CLAMP, EXP_CLAMP)))


def weight_matrix(spec: ModelSpec, X: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """F(lambda' W(x_t)) for every row and every lambda: (n, L)."""
    lambdas = np.asarray(lambdas, dtype=float).reshape(-1, spec.k_x)
    return weight_logistic(bounded_transform(spec, X) @ lambdas.T)


def weight_F(spec: ModelSpec, lam, x_row) -> float:
    x = np.atleast_1d(np.asarray(x_row, dtype=float))[None, :]
    return float(weight_matrix(spec, x, np.atleast_1d(lam))[0, 0])


# --------------------------------------------------------------------------
# constrained least squares on psi for a fixed pi


def _active_set_candidates(n_con: int, k: int):
    for size in range(1, min(n_con, k) + 1):
        yield from itertools.combinations(range(n_con), size)


def constrained_quadratic_min(A: np.ndarray, c: np.ndarray, G: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Minimize 0.5 psi'A psi - c'psi subject to G psi <= h (A positive definite).

    Solves the equality-constrained problem for every active set of size at
    most dim(psi) and keeps the best feasible point. Intended for the small
    dimensions of this model family; the number of candidate sets is capped.
    """
    k = A.shape[0]
    best, best_val = None, np.inf
    n_sets = sum(1 for _ in itertools.islice(_active_set_candidates(G.shape[0], k), 5000))
    if n_sets >= 5000:
        raise ValueError("too many constraints for exhaustive active-set search")
    for act in _active_set_candidates(G.shape[0], k):
        Ga = G[list(act)]
        kkt = np.block([[A, Ga.T], [Ga, np.zeros((len(act), len(act)))]])
        rhs = np.concatenate([c, h[list(act)]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        psi = sol[:k]
        if np.all(G @ psi <= h + 1e-10):
            val = 0.5 * psi @ A @ psi - c @ psi
            if val < best_val - 1e-15:
                best, best_val = psi, val
    if best is None:
        raise np.linalg.LinAlgError("no feasible point found")
    return best
