"""Simulation study on a linear structural causal model.

    eps, eps1, eps2, X3, X4, X5 ~ N(0, 1) i.i.d.
    X2 = X3 + eps2
    X1 = 0.5 X2 + X4 + eps1
    Y  = X1 + 0.5 X2 + X3 + X5 + eps

The direct effect of X1 on Y is 1.  Eight adjustment sets that all contain the
confounder X2 give eight estimators of it; the misspecified variant replaces
{X1, X2, X3, X4} by {X1, X3, X4}.

The six Gaussian noise terms are generated from six latent uniforms, which is
the cube the binned perturbation reweights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from ..calibration import calibrated_ci, scaled_estimator_ci
from ..estimation import AdjustmentSet, CollinearityError, Dataset, build_bundle, naive_ci
from ..perturbation import (
    NO_PERTURBATION,
    DegeneratePerturbationError,
    Model,
    PerturbationSpec,
    sample_binned,
    sample_resample,
    true_delta,
)
from ..stats_core import DomainError, RandomStream, SingularMatrixError

COLUMNS = ("X1", "X2", "X3", "X4", "X5")
LATENT = ("eps", "eps1", "eps2", "X3", "X4", "X5")
THETA0 = 1.0

ADJUSTMENT_SETS = (
    ("X1", "X2"),
    ("X1", "X2", "X3"),
    ("X1", "X2", "X4"),
    ("X1", "X2", "X5"),
    ("X1", "X2", "X3", "X4"),
    ("X1", "X2", "X3", "X5"),
    ("X1", "X2", "X4", "X5"),
    ("X1", "X2", "X3", "X4", "X5"),
)
MISSPECIFIED_SETS = tuple(("X1", "X3", "X4") if s == ("X1", "X2", "X3", "X4") else s for s in ADJUSTMENT_SETS)
MISSPECIFIED_INDEX = ADJUSTMENT_SETS.index(("X1", "X2", "X3", "X4"))

PERT_MODELS = ("BinnedGamma", "Resample", "None")

# The influence functions of the eight agreeing estimators span only six
# dimensions (seven with the misspecified set), so the full-rank inverse square
# root would amplify pure sampling noise.  Directions of the influence
# correlation matrix below this fraction of its top eigenvalue are dropped; the
# smallest genuine ratio is about 0.015 (0.007 misspecified).
RANK_TOL = 3e-3


def scm_rows_from_latent(u: np.ndarray) -> np.ndarray:
    """Map latent uniforms ``(n, 6)`` to rows ``[X1, X2, X3, X4, X5, Y]``."""
    u = np.clip(np.asarray(u, dtype=float), 1e-300, 1 - 1e-16)
    eps, eps1, eps2, x3, x4, x5 = special.ndtri(u).T
    x2 = x3 + eps2
    x1 = 0.5 * x2 + x4 + eps1
    y = x1 + 0.5 * x2 + x3 + x5 + eps
    return np.column_stack([x1, x2, x3, x4, x5, y])


def _scm_sampler(rng: np.random.Generator, size: int) -> np.ndarray:
    return scm_rows_from_latent(rng.random((size, len(LATENT))))


def rows_to_dataset(rows: np.ndarray) -> Dataset:
    return Dataset(COLUMNS, rows[:, :5], rows[:, 5], "Y")


def generate_scm(n: int, stream: RandomStream) -> tuple[Dataset, np.ndarray]:
    """Unperturbed SCM sample and the latent uniforms it was built from."""
    if n < 1:
        raise DomainError("n must be >= 1")
    latent = stream.generator().random((n, len(LATENT)))
    return rows_to_dataset(scm_rows_from_latent(latent)), latent


def perturbation_for(model: str, m: int) -> PerturbationSpec:
    if model == "BinnedGamma":
        return PerturbationSpec.binned_scm(m, p=len(COLUMNS))
    if model == "Resample":
        return PerturbationSpec(Model.RESAMPLE, m=m)
    if model == "None":
        return NO_PERTURBATION
    raise DomainError(f"unknown perturbation model {model!r}; expected one of {PERT_MODELS}")


def sample_perturbed_scm(model: str, n: int, m: int, stream: RandomStream) -> Dataset:
    spec = perturbation_for(model, m)
    if spec.model is Model.BINNED:
        rows = sample_binned(spec, scm_rows_from_latent, n, stream, base_label="scm").data
    elif spec.model is Model.RESAMPLE:
        rows = sample_resample(m, _scm_sampler, n, stream, base_label="scm").data
    else:
        rows = _scm_sampler(stream.generator(), n)
    return rows_to_dataset(rows)


def adjustment_sets(data: Dataset, misspecified: bool = False) -> list[AdjustmentSet]:
    sets = MISSPECIFIED_SETS if misspecified else ADJUSTMENT_SETS
    return [AdjustmentSet.from_names(data, s, "X1") for s in sets]


@dataclass(frozen=True)
class ScmConfig:
    n: int
    m: int
    pert_model: str = "BinnedGamma"
    misspecified: bool = False
    replicates: int = 1000
    alpha: float = 0.05
    seed: int = 0
    rank_tol: float = RANK_TOL

    def __post_init__(self):
        if self.replicates < 1:
            raise DomainError("replicates must be >= 1")
        if self.n < 10 or self.m < 10:
            raise DomainError("n and m must be >= 10")
        if self.pert_model not in PERT_MODELS:
            raise DomainError(f"unknown perturbation model {self.pert_model!r}")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if not 0 <= self.rank_tol < 1:
            raise DomainError("rank_tol must lie in [0, 1)")

    @property
    def true_delta(self) -> float:
        return true_delta(perturbation_for(self.pert_model, self.m), self.n)


@dataclass
class CellRun:
    """Per-replicate outputs of one grid cell; failed replicates are dropped."""

    config: ScmConfig
    delta_hat: np.ndarray
    calibrated_cover: np.ndarray
    naive_cover: np.ndarray
    t_interval_cover: np.ndarray
    failures: int


def simulate_cell(config: ScmConfig) -> CellRun:
    """Run every replicate of one (n, m, model, misspecified) cell.

    Replicate ``r`` uses stream ``(seed, r)`` in every cell, so cells that differ
    only in the adjustment sets see identical data.
    """
    deltas, cal, naive, thm = [], [], [], []
    failures = 0
    for rep in range(config.replicates):
        stream = RandomStream(config.seed, rep)
        try:
            data = sample_perturbed_scm(config.pert_model, config.n, config.m, stream)
            bundle = build_bundle(data, adjustment_sets(data, config.misspecified))
            result = calibrated_ci(bundle, config.alpha, auto_decorrelate=True, rank_tol=config.rank_tol)
        except (CollinearityError, SingularMatrixError, DegeneratePerturbationError, ArithmeticError):
            failures += 1
            continue
        deltas.append(result.delta_hat)
        thm.append(result.covers(THETA0))
        cal_row, naive_row = [], []
        for k in range(bundle.K):
            lo, hi = scaled_estimator_ci(bundle, k, result.delta_hat, config.alpha)
            cal_row.append(lo <= THETA0 <= hi)
            lo, hi = naive_ci(bundle.estimates[k], bundle.variances[k], bundle.n, config.alpha)
            naive_row.append(lo <= THETA0 <= hi)
        cal.append(cal_row)
        naive.append(naive_row)
    return CellRun(
        config,
        np.array(deltas),
        np.array(cal, dtype=bool).reshape(-1, len(ADJUSTMENT_SETS)),
        np.array(naive, dtype=bool).reshape(-1, len(ADJUSTMENT_SETS)),
        np.array(thm, dtype=bool),
        failures,
    )


def _agreeing(config: ScmConfig) -> np.ndarray:
    keep = np.ones(len(ADJUSTMENT_SETS), dtype=bool)
    if config.misspecified:
        keep[MISSPECIFIED_INDEX] = False
    return keep


def delta_row(run: CellRun) -> dict:
    c = run.config
    d = run.delta_hat
    return {
        "n": c.n,
        "m": c.m,
        "model": c.pert_model,
        "misspecified": c.misspecified,
        "replicates": c.replicates,
        "failures": run.failures,
        "mean_delta_hat": float(d.mean()) if d.size else math.nan,
        "q025": float(np.quantile(d, 0.025)) if d.size else math.nan,
        "q975": float(np.quantile(d, 0.975)) if d.size else math.nan,
        "true_delta": c.true_delta,
    }


def coverage_row(run: CellRun) -> dict:
    c = run.config
    keep = _agreeing(c)
    cal = run.calibrated_cover.mean(axis=0)
    naive = run.naive_cover.mean(axis=0)
    row = {
        "n": c.n,
        "m": c.m,
        "model": c.pert_model,
        "misspecified": c.misspecified,
        "replicates": c.replicates,
        "failures": run.failures,
        "calibrated_coverage": float(cal[keep].mean()),
        "naive_coverage": float(naive[keep].mean()),
        "t_interval_coverage": float(run.t_interval_cover.mean()),
    }
    for k in range(len(ADJUSTMENT_SETS)):
        row[f"calibrated_{k + 1}"] = float(cal[k])
        row[f"naive_{k + 1}"] = float(naive[k])
    return row


def run_delta_experiment(config: ScmConfig) -> dict:
    return delta_row(simulate_cell(config))


def run_coverage_experiment(config: ScmConfig) -> dict:
    return coverage_row(simulate_cell(config))


def grid_configs(
    ns=(200, 500, 1000),
    ms=(200, 500, 1000),
    models=("BinnedGamma", "Resample"),
    misspecified=(False, True),
    replicates: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    rank_tol: float = RANK_TOL,
) -> list[ScmConfig]:
    return [
        ScmConfig(n, m, model, mis, replicates, alpha, seed, rank_tol)
        for model in models
        for mis in misspecified
        for n in ns
        for m in ms
    ]


def config_dict(config: ScmConfig) -> dict:
    return asdict(config)
