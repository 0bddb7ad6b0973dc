"""Regression-adjusted OLS estimators with plug-in influence values.

For each adjustment set the coefficient of one target covariate is estimated
by least squares (intercept always included), and the plug-in influence value
of observation ``i`` is

    phi_i = (G^-1)[t, :] @ x_i * (y_i - x_i @ beta),    G = X'X / n,

so that ``theta_hat - theta`` is approximately ``mean(phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .stats_core import DomainError, gaussian_quantile

RANK_TOL = 1e-10


class CollinearityError(ArithmeticError):
    """Design matrix of an adjustment set is (numerically) rank deficient."""

    def __init__(self, message: str, label: str = ""):
        super().__init__(message)
        self.label = label


@dataclass(frozen=True)
class Dataset:
    column_names: tuple[str, ...]
    values: np.ndarray
    response: np.ndarray
    response_name: str = "y"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        response = np.asarray(self.response, dtype=float).ravel()
        if values.ndim != 2:
            raise DomainError("values must be a 2-d array")
        if values.shape[1] != len(self.column_names):
            raise DomainError("column count does not match column names")
        if len(set(self.column_names)) != len(self.column_names):
            raise DomainError("column names must be unique")
        if len(response) != len(values):
            raise DomainError("response length does not match row count")
        if not (np.isfinite(values).all() and np.isfinite(response).all()):
            raise DomainError("dataset contains missing or non-finite values")
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "response", response)

    @property
    def n(self) -> int:
        return len(self.response)

    def index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise DomainError(f"unknown column {name!r}") from None

    def subset(self, rows) -> "Dataset":
        return Dataset(self.column_names, self.values[rows], self.response[rows], self.response_name)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, response: str) -> "Dataset":
        if response not in frame.columns:
            raise DomainError(f"response column {response!r} not found")
        covariates = frame.drop(columns=[response])
        return cls(tuple(map(str, covariates.columns)), covariates.to_numpy(dtype=float),
                   frame[response].to_numpy(dtype=float), response)

    @classmethod
    def from_csv(cls, path, response: str) -> "Dataset":
        frame = pd.read_csv(path, encoding="utf-8")
        return cls.from_frame(frame, response)


@dataclass(frozen=True)
class AdjustmentSet:
    """Covariate columns of one regression; ``indices[target_position]`` is the target."""

    indices: tuple[int, ...]
    target_position: int = 0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(set(self.indices)) != len(self.indices):
            raise DomainError("adjustment set indices must be distinct")
        if not 0 <= self.target_position < len(self.indices):
            raise DomainError("target_position out of range")

    @property
    def target(self) -> int:
        return self.indices[self.target_position]

    @classmethod
    def from_names(cls, data: Dataset, names: Sequence[str], target: str) -> "AdjustmentSet":
        names = list(names)
        if target not in names:
            names = [target] + names
        idx = tuple(data.index(c) for c in names)
        return cls(idx, names.index(target), label="{" + ", ".join(names) + "}")

    def describe(self, data: Dataset) -> str:
        return self.label or "{" + ", ".join(data.column_names[i] for i in self.indices) + "}"


@dataclass(frozen=True)
class EstimatorBundle:
    """K estimates of one scalar target with their plug-in influence values."""

    estimates: np.ndarray
    influence: np.ndarray
    variances: np.ndarray
    n: int
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=float).ravel()
        inf = np.asarray(self.influence, dtype=float)
        var = np.asarray(self.variances, dtype=float).ravel()
        if inf.ndim != 2 or inf.shape[1] != est.size or var.size != est.size:
            raise DomainError("estimates, influence columns and variances must agree in K")
        if est.size < 2:
            raise DomainError("a bundle needs K >= 2 estimators")
        labels = tuple(self.labels) or tuple(f"est{k + 1}" for k in range(est.size))
        object.__setattr__(self, "estimates", est)
        object.__setattr__(self, "influence", inf)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return self.estimates.size

    @classmethod
    def from_influence(cls, estimates, influence, labels=()) -> "EstimatorBundle":
        """Bundle with plug-in variances computed from (centered) influence values."""
        inf = np.asarray(influence, dtype=float)
        inf = inf - inf.mean(axis=0)
        return cls(np.asarray(estimates, float), inf, (inf**2).mean(axis=0), inf.shape[0], labels)


def _design(data: Dataset, aset: AdjustmentSet) -> np.ndarray:
    if max(aset.indices) >= data.values.shape[1] or min(aset.indices) < 0:
        raise DomainError("adjustment set refers to a missing column")
    return np.column_stack([np.ones(data.n), data.values[:, aset.indices]])


def ols_fit(data: Dataset, aset: AdjustmentSet) -> tuple[float, np.ndarray]:
    """Target coefficient and per-observation influence values for one adjustment set."""
    x = _design(data, aset)
    n, p = x.shape
    label = aset.describe(data)
    if n <= p:
        raise CollinearityError(f"adjustment set {label} has {p} parameters for {n} rows", label)
    q, r, perm = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.min() < RANK_TOL * diag.max():
        raise CollinearityError(f"design for adjustment set {label} is rank deficient", label)
    coef = np.empty(p)
    coef[perm] = linalg.solve_triangular(r, q.T @ data.response)
    resid = data.response - x @ coef
    # row t of (X'X)^-1 = P R^-1 R^-T P'
    t = aset.target_position + 1
    e_t = np.zeros(p)
    e_t[np.flatnonzero(perm == t)[0]] = 1.0
    z = linalg.solve_triangular(r, linalg.solve_triangular(r, e_t, trans="T"))
    row = np.empty(p)
    row[perm] = z
    influence = n * (x @ row) * resid
    return float(coef[t]), influence


def build_bundle(data: Dataset, sets: Sequence[AdjustmentSet]) -> EstimatorBundle:
    if len(sets) < 2:
        raise DomainError("need at least two adjustment sets")
    estimates, columns = zip(*(ols_fit(data, s) for s in sets))
    influence = np.column_stack(columns)
    labels = tuple(s.describe(data) for s in sets)
    influence = influence - influence.mean(axis=0)
    return EstimatorBundle(np.array(estimates), influence, (influence**2).mean(axis=0), data.n, labels)


def fit_all_coefficients(data: Dataset, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients and influence matrix for every covariate of one regression.

    Returns ``(coef, influence)`` with ``coef`` of length ``len(indices)`` and
    ``influence`` of shape ``(n, len(indices))`` (intercept excluded).
    """
    x = _design(data, AdjustmentSet(tuple(indices)))
    n, p = x.shape
    if n <= p:
        raise CollinearityError("more parameters than rows")
    q, r, perm = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.min() < RANK_TOL * diag.max():
        raise CollinearityError("design is rank deficient")
    coef = np.empty(p)
    coef[perm] = linalg.solve_triangular(r, q.T @ data.response)
    resid = data.response - x @ coef
    rinv = linalg.solve_triangular(r, np.eye(p))
    inv = np.empty((p, p))
    inv[np.ix_(perm, perm)] = rinv @ rinv.T
    influence = n * (x @ inv[:, 1:]) * resid[:, None]
    return coef[1:], influence


def naive_ci(theta_hat: float, variance: float, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Classical interval ``theta_hat +- z_{1-alpha/2} sqrt(variance / n)``."""
    if not variance > 0:
        raise DomainError("variance must be positive")
    if n < 1:
        raise DomainError("n must be >= 1")
    half = gaussian_quantile(1 - alpha / 2) * np.sqrt(variance / n)
    return float(theta_hat - half), float(theta_hat + half)
