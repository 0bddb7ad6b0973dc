"""Numerical kernel: distribution functions, symmetric matrix roots, random streams.

Distribution functions are thin wrappers over ``scipy.special`` with the
domain checks the rest of the package relies on.  Every stochastic routine
in the package takes a :class:`RandomStream`, so that a replicate is a
deterministic function of ``(seed, stream_id)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


class DomainError(ValueError):
    """Argument outside the domain of a numerical routine."""


class SingularMatrixError(ArithmeticError):
    """Matrix is singular (or numerically so) where an inverse is required."""

    def __init__(self, message: str, eigenvalue: float | None = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class RandomStream:
    """Seedable, splittable source of randomness.

    Streams are PCG64 generators seeded through ``numpy.random.SeedSequence``
    with ``stream_id`` as the spawn key, so distinct ids yield independent
    streams and equal ``(seed, stream_id)`` pairs yield identical draws.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, stream_id: int) -> "RandomStream":
        return RandomStream(self.seed, stream_id)


def _check_prob(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")


def _check_df(df) -> None:
    if df < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")


def gaussian_cdf(x):
    return special.ndtr(x)


def gaussian_quantile(p: float) -> float:
    """Standard normal quantile ``z`` with ``Phi(z) = p``."""
    _check_prob(p)
    return float(special.ndtri(p))


def t_cdf(df: float, x):
    _check_df(df)
    return special.stdtr(df, x)


def t_quantile(df: float, p: float) -> float:
    """Quantile of Student's t with ``df`` degrees of freedom."""
    _check_df(df)
    _check_prob(p)
    return float(special.stdtrit(df, p))


def chisq_cdf(df: float, x):
    """Chi-square CDF, the regularized lower incomplete gamma ``P(df/2, x/2)``."""
    _check_df(df)
    if np.any(np.asarray(x) < 0):
        raise DomainError("chi-square CDF is defined for x >= 0")
    return special.gammainc(df / 2.0, np.asarray(x, dtype=float) / 2.0)


def as_symmetric(matrix, rtol: float = 1e-12) -> np.ndarray:
    """Validate symmetry (to ``rtol`` relative) and return the exactly symmetrized matrix."""
    a = np.array(matrix, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise DomainError(f"expected a non-empty square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.abs(a - a.T).max() > rtol * scale:
        raise DomainError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def sym_inverse_sqrt(matrix, ridge: float = 0.0) -> np.ndarray:
    """Inverse square root ``R`` of ``M + ridge * I`` via symmetric eigendecomposition.

    ``R`` is symmetric positive definite and satisfies ``R (M + ridge I) R = I``.
    Raises :class:`SingularMatrixError` when the smallest eigenvalue is not
    comfortably positive relative to the largest.
    """
    if ridge < 0:
        raise DomainError("ridge must be nonnegative")
    m = as_symmetric(matrix)
    dim = m.shape[0]
    m = m + ridge * np.eye(dim)
    eigval, eigvec = np.linalg.eigh(m)
    lo, hi = eigval[0], eigval[-1]
    if hi <= 0 or lo <= dim * 1e-12 * hi:
        raise SingularMatrixError(
            f"matrix is singular or not positive definite (smallest eigenvalue {lo:.3e}, "
            f"largest {hi:.3e})",
            eigenvalue=float(lo),
        )
    r = (eigvec / np.sqrt(eigval)) @ eigvec.T
    return 0.5 * (r + r.T)


def quantile_band(values, lower: float = 0.025, upper: float = 0.975) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(np.quantile(v, lower)), float(np.quantile(v, upper))


def mc_standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(v.size))
