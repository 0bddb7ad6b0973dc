"""Calibrated confidence intervals from between-estimator variability.

Given K asymptotically linear estimators of the same target, the weighted
between-estimator variance

    sigma_bet^2 = sum_k a_k (theta_k - theta_w)^2,   a_k proportional to 1 / Var(phi_k),

carries the same unknown inflation factor ``delta**2`` as the estimators
themselves, so ``(theta_w - theta) / (sigma_bet / sqrt(K - 1))`` is
asymptotically t(K - 1) whatever ``delta`` is.  Correlated estimators are first
mapped to uncorrelated ones by a row-normalized inverse square root of their
covariance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .estimation import EstimatorBundle
from .stats_core import DomainError, SingularMatrixError, gaussian_quantile, sym_inverse_sqrt, t_quantile

DECORRELATE_THRESHOLD = 0.05


class IllConditionedTransformError(ArithmeticError):
    """A row of the inverse square root sums to (numerically) zero."""


class InsufficientEstimatorsError(DomainError):
    """Too few estimators for the requested interval."""


@dataclass(frozen=True)
class CalibrationResult:
    theta_w: float
    sigma_bet: float
    delta_hat: float
    df: int
    lower: float
    upper: float
    alpha: float
    weights: tuple[float, ...]
    decorrelated: bool
    degenerate: bool = False
    pooled_var: float = math.nan

    @property
    def interval(self) -> tuple[float, float]:
        return self.lower, self.upper

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_json(self) -> dict:
        out = asdict(self)
        out["weights"] = list(self.weights)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationResult":
        obj = dict(obj)
        obj["weights"] = tuple(obj["weights"])
        return cls(**obj)


def influence_covariance(bundle: EstimatorBundle) -> np.ndarray:
    """Plug-in covariance of the influence values, ``(1/n) sum_i phi_i phi_i'``."""
    centered = bundle.influence - bundle.influence.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    return 0.5 * (cov + cov.T)


def max_abs_correlation(bundle: EstimatorBundle) -> float:
    cov = influence_covariance(bundle)
    sd = np.sqrt(np.diag(cov))
    if np.any(sd == 0):
        return 1.0
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 0.0)
    return float(np.abs(corr).max())


def _balanced_whitening(sigma: np.ndarray, rank_tol: float) -> np.ndarray | None:
    """Whitening rows for the well-determined part of ``sigma``, or None if full rank.

    Eigen-directions of the correlation matrix below ``rank_tol`` times the
    largest eigenvalue are dropped.  The ``r`` kept whitening rows are rotated by
    a Householder reflection so that all row sums are equal, then normalized.
    """
    sd = np.sqrt(np.diag(sigma))
    if np.any(sd == 0):
        raise SingularMatrixError("an estimator has zero variance; drop it", eigenvalue=0.0)
    lam, vec = np.linalg.eigh(sigma / np.outer(sd, sd))
    keep = lam > rank_tol * lam[-1]
    if keep.all():
        return None
    r = int(keep.sum())
    if r < 2:
        raise SingularMatrixError(
            "estimator covariance has numerical rank 1; the estimators are near-duplicates",
            eigenvalue=float(lam[~keep].max()),
        )
    white = (vec[:, keep] / np.sqrt(lam[keep])).T / sd
    sums = white.sum(axis=1)
    norm = np.linalg.norm(sums)
    if norm <= 1e-10 * np.linalg.norm(white):
        raise IllConditionedTransformError("the common direction lies outside the kept eigenspace")
    target = np.full(r, norm / math.sqrt(r))
    u = sums - target
    if np.linalg.norm(u) > 1e-14 * norm:
        white = white - np.outer(u, 2.0 * (u @ white) / (u @ u))
    return white / target[:, None]


def transform_matrix(bundle: EstimatorBundle, ridge: float = 0.0, rank_tol: float = 0.0) -> np.ndarray:
    """Row-normalized inverse square root of the estimator covariance.

    With ``rank_tol > 0`` and a covariance whose correlation matrix has
    eigenvalues below ``rank_tol`` times its largest, the result has only
    ``r < K`` rows: uncorrelated, equal-variance combinations spanning the
    well-determined directions.  Otherwise it is the ``K x K`` symmetric form.
    """
    if not 0 <= rank_tol < 1:
        raise DomainError("rank_tol must lie in [0, 1)")
    if ridge < 0:
        raise DomainError("ridge must be nonnegative")
    sigma = influence_covariance(bundle) / bundle.n
    if ridge:
        sigma = sigma + ridge * np.eye(bundle.K)
    if rank_tol > 0:
        reduced = _balanced_whitening(sigma, rank_tol)
        if reduced is not None:
            return reduced
    try:
        root = sym_inverse_sqrt(sigma)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"estimator covariance is singular ({exc}); drop near-duplicate estimators",
            eigenvalue=exc.eigenvalue,
        ) from None
    sums = root.sum(axis=1)
    if np.any(np.abs(sums) <= 1e-10):
        raise IllConditionedTransformError("a row of the inverse square root sums to zero")
    return root / sums[:, None]


def decorrelate(bundle: EstimatorBundle, ridge: float = 0.0, rank_tol: float = 0.0) -> EstimatorBundle:
    """Linear recombination of the estimators into uncorrelated ones with the same target."""
    t = transform_matrix(bundle, ridge, rank_tol)
    influence = bundle.influence @ t.T
    return EstimatorBundle(
        t @ bundle.estimates,
        influence,
        (influence**2).mean(axis=0),
        bundle.n,
        tuple(f"eta{k + 1}" for k in range(t.shape[0])),
    )


def inverse_variance_weights(variances) -> np.ndarray:
    v = np.asarray(variances, dtype=float)
    if np.any(~(v > 0)):
        raise DomainError("all variances must be positive")
    w = 1.0 / v
    return w / w.sum()


def _spread(estimates: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, float, float, float]:
    """Weights, weighted mean, weighted between-estimator sd, and 1 / sum(1 / var)."""
    w = inverse_variance_weights(variances)
    center = float(w @ estimates)
    sigma_bet = math.sqrt(float(w @ (estimates - center) ** 2))
    pooled_var = 1.0 / float(np.sum(1.0 / variances))
    return w, center, sigma_bet, pooled_var


def _delta(n: int, sigma_bet: float, df: int, pooled_var: float) -> float:
    return math.sqrt(n * sigma_bet**2 / (df * pooled_var))


def calibrated_ci(
    bundle: EstimatorBundle,
    alpha: float = 0.05,
    auto_decorrelate: bool | None = None,
    ridge: float = 0.0,
    rank_tol: float = 0.0,
) -> CalibrationResult:
    """Calibrated interval ``theta_w +- t_{K-1} sigma_bet / sqrt(K - 1)``.

    ``auto_decorrelate=None`` decorrelates only when some pair of influence
    columns has absolute correlation above 0.05.  The reported ``delta_hat`` is
    floored at 1; the interval itself never uses it.  When ``rank_tol`` drops
    directions during decorrelation, ``K`` above is the number kept and
    ``weights`` has that length.
    """
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    if np.ptp(bundle.estimates) == 0.0:
        df = bundle.K - 1
        c = float(bundle.estimates[0])
        weights = tuple(np.full(bundle.K, 1.0 / bundle.K))
        pooled = 1.0 / float(np.sum(1.0 / bundle.variances))
        return CalibrationResult(c, 0.0, 1.0, df, c, c, alpha, weights, False, degenerate=True, pooled_var=pooled)
    if auto_decorrelate is None:
        auto_decorrelate = max_abs_correlation(bundle) > DECORRELATE_THRESHOLD
    work = decorrelate(bundle, ridge, rank_tol) if auto_decorrelate else bundle
    df = work.K - 1
    w, center, sigma_bet, pooled_var = _spread(work.estimates, work.variances)
    half = t_quantile(df, 1 - alpha / 2) * sigma_bet / math.sqrt(df)
    delta_hat = max(1.0, _delta(bundle.n, sigma_bet, df, pooled_var))
    return CalibrationResult(
        center, sigma_bet, delta_hat, df, center - half, center + half, alpha,
        tuple(float(x) for x in w), bool(auto_decorrelate), degenerate=sigma_bet == 0.0,
        pooled_var=pooled_var,
    )


def scaled_estimator_ci(
    bundle: EstimatorBundle, k: int, delta_hat: float, alpha: float = 0.05
) -> tuple[float, float]:
    """Interval for estimator ``k`` (0-based) stretched by ``delta_hat``."""
    if not 0 <= k < bundle.K:
        raise DomainError(f"estimator index {k} out of range for K={bundle.K}")
    if delta_hat < 1:
        raise DomainError("delta_hat must be >= 1")
    half = gaussian_quantile(1 - alpha / 2) * delta_hat * math.sqrt(bundle.variances[k] / bundle.n)
    theta = float(bundle.estimates[k])
    return theta - half, theta + half


def robust_ci(bundle: EstimatorBundle, trusted: int, alpha: float = 0.05) -> CalibrationResult:
    """Interval centred at a trusted estimator, calibrated by the spread of the others.

    Conservative when the other estimators disagree with the trusted one.
    ``weights`` reports the inverse-variance weights of the remaining
    estimators, with zero in the trusted slot.
    """
    K = bundle.K
    if K < 3:
        raise InsufficientEstimatorsError(f"insufficient estimators: robust interval needs K >= 3, got {K}")
    if not 0 <= trusted < K:
        raise DomainError(f"trusted index {trusted} out of range for K={K}")
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    rest = np.arange(K) != trusted
    est, var = bundle.estimates[rest], bundle.variances[rest]
    w, _, sigma_bet, pooled_var = _spread(est, var)
    df = K - 2
    scale = math.sqrt(float(np.sum(bundle.variances[trusted] / var)))
    half = t_quantile(df, 1 - alpha / 2) * scale * sigma_bet / math.sqrt(df)
    center = float(bundle.estimates[trusted])
    weights = np.zeros(K)
    weights[rest] = w
    delta_hat = max(1.0, _delta(bundle.n, sigma_bet, df, pooled_var))
    return CalibrationResult(
        center, sigma_bet, delta_hat, df, center - half, center + half, alpha,
        tuple(float(x) for x in weights), False, degenerate=sigma_bet == 0.0,
        pooled_var=pooled_var,
    )


def delta_hat_simple(bundle: EstimatorBundle, known_sigma2: float) -> float:
    """Untruncated ``delta_hat`` for uncorrelated estimators sharing a known variance.

    ``delta_hat**2 = n * sum_k (theta_k - mean)**2 / ((K - 1) * sigma2)``, which
    is ``delta**2 * chi2(K-1) / (K-1)`` asymptotically.
    """
    if not known_sigma2 > 0:
        raise DomainError("known_sigma2 must be positive")
    est = bundle.estimates
    spread = float(np.sum((est - est.mean()) ** 2))
    return math.sqrt(bundle.n * spread / ((bundle.K - 1) * known_sigma2))
