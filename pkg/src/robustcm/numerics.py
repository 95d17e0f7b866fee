"""
Numerical primitives shared by the estimation and testing modules.

Contents
--------
chi2_1_sf : survival function of the chi-squared(1) law
solve_spd : symmetric positive-definite solve with a pivot guard
RngStream, gaussian_draws : counter-based reproducible Gaussian streams
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

PIVOT_TOL = 1e-10


class NearSingular(np.linalg.LinAlgError):
    """Raised when a symmetric factorization meets a pivot that is too small.

    Attributes
    ----------
    pivot_ratio : float
        Smallest Cholesky pivot divided by the largest diagonal entry.
    """

    def __init__(self, pivot_ratio: float, what: str = "matrix"):
        self.pivot_ratio = float(pivot_ratio)
        super().__init__(f"{what} is near singular (pivot ratio {self.pivot_ratio:.3e})")


def chi2_1_sf(x):
    """P(chi2(1) > x), computed as erfc(sqrt(x / 2)).

    Accepts scalars or arrays; negative input raises ``ValueError``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("chi2_1_sf is defined for x >= 0")
    out = special.erfc(np.sqrt(arr / 2.0))
    return float(out) if out.ndim == 0 else out


def _pivot_ratio(A: np.ndarray) -> float:
    scale = float(np.max(np.abs(np.diag(A))))
    if scale == 0.0 or not np.all(np.isfinite(A)):
        return 0.0
    try:
        c = linalg.cholesky(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return 0.0
    return float(np.min(np.diag(c)) ** 2 / scale)


def solve_spd(A, B, what: str = "matrix") -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite ``A``.

    Parameters
    ----------
    A : array_like, shape (k, k)
        Symmetric matrix. Only the lower triangle is read by the factorization.
    B : array_like, shape (k,) or (k, m)
    what : str
        Label used in the error message.

    Raises
    ------
    NearSingular
        If the smallest Cholesky pivot is below ``1e-10`` times the largest
        diagonal entry, or the factorization fails outright.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if B.shape[0] != A.shape[0]:
        raise ValueError("B is not conformable with A")
    scale = float(np.max(np.abs(np.diag(A)))) if A.size else 0.0
    if scale == 0.0 or not np.all(np.isfinite(A)):
        raise NearSingular(0.0, what)
    try:
        c = linalg.cholesky(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NearSingular(0.0, what) from None
    ratio = float(np.min(np.diag(c)) ** 2 / scale)
    if ratio < PIVOT_TOL:
        raise NearSingular(ratio, what)
    return linalg.cho_solve((c, True), B, check_finite=False)


def batched_spd_inverse(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Invert a stack of symmetric matrices ``A[..., k, k]``.

    Returns ``(inv, ok)`` where ``ok`` flags matrices that passed the same
    pivot test as :func:`solve_spd`. Entries of ``inv`` where ``ok`` is False
    are filled with NaN.
    """
    A = np.asarray(A, dtype=float)
    k = A.shape[-1]
    flat = A.reshape(-1, k, k)
    inv = np.full_like(flat, np.nan)
    ok = np.zeros(flat.shape[0], dtype=bool)
    scale = np.max(np.abs(np.diagonal(flat, axis1=1, axis2=2)), axis=1)
    try:
        chol = np.linalg.cholesky(flat)
        piv = np.diagonal(chol, axis1=1, axis2=2).min(axis=1) ** 2
        ok = (scale > 0) & (piv >= PIVOT_TOL * scale)
    except np.linalg.LinAlgError:
        ok = np.array([_pivot_ratio(a) >= PIVOT_TOL for a in flat])
    if ok.any():
        inv[ok] = np.linalg.inv(flat[ok])
        inv[ok] = 0.5 * (inv[ok] + np.swapaxes(inv[ok], 1, 2))
    return inv.reshape(A.shape), ok.reshape(A.shape[:-2])


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Key for an independent, reproducible random stream.

    The stream is a Philox counter-based generator keyed by
    ``(seed, replication, draw, purpose, sub)`` through
    :class:`numpy.random.SeedSequence`, so output depends only on the key and
    never on the order in which streams are created.
    """

    seed: int
    replication: int = 0
    draw: int = 0
    purpose: str = "default"
    sub: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & (2**64 - 1),
            spawn_key=(int(self.replication), int(self.draw), _purpose_code(self.purpose), int(self.sub)),
        )
        return np.random.Generator(np.random.Philox(ss))

    def child(self, **changes) -> "RngStream":
        fields = dict(seed=self.seed, replication=self.replication, draw=self.draw,
                      purpose=self.purpose, sub=self.sub)
        fields.update(changes)
        return RngStream(**fields)


def gaussian_draws(stream: RngStream, count: int) -> np.ndarray:
    """``count`` iid N(0, 1) draws determined entirely by ``stream``."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count == 0:
        return np.empty(0)
    return stream.generator().standard_normal(count)


def gaussian_matrix(streams, count: int) -> np.ndarray:
    """Stack ``gaussian_draws(s, count)`` for each stream in ``streams`` as rows."""
    streams = list(streams)
    out = np.empty((len(streams), count))
    for i, s in enumerate(streams):
        out[i] = gaussian_draws(s, count)
    return out
