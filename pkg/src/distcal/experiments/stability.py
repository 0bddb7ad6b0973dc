"""Ranking stability on the UCI student-performance (Portuguese) data.

Seven binary covariates are ranked by effect size on two random halves of the
data, and the overlap of the two top-``l`` sets measures how reproducible the
ranking is.  Method 1 fits a single randomly chosen adjustment set; method 2
pools ``K`` random adjustment sets with the calibrated weighted estimator.

Effect size is ``|coefficient| / standard error``.  Method 1 uses the sandwich
standard error of its one regression; method 2 uses the calibrated one,
``max(delta_hat, 1) * sqrt(pooled_var / n)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ..calibration import calibrated_ci
from ..estimation import CollinearityError, Dataset, EstimatorBundle, fit_all_coefficients
from ..stats_core import DomainError, RandomStream, SingularMatrixError, gaussian_quantile, quantile_band

RESPONSE = "G3"

# name -> (raw column, encoder)
SELECTED = {
    "Pstatus": ("Pstatus", lambda s: s.eq("T")),
    "schoolsup": ("schoolsup", lambda s: s.eq("yes")),
    "famsup": ("famsup", lambda s: s.eq("yes")),
    "romantic": ("romantic", lambda s: s.eq("yes")),
    "paid": ("paid", lambda s: s.eq("yes")),
    "Medu": ("Medu", lambda s: s.astype(int) >= 3),
    "Fedu": ("Fedu", lambda s: s.astype(int) >= 3),
}
SELECTED_NAMES = tuple(SELECTED)

_BINARY_CODES = {
    "school": "MS",
    "sex": "M",
    "address": "U",
    "famsize": "GT3",
}
_YES_NO = ("activities", "nursery", "higher", "internet")
_NUMERIC = ("age", "traveltime", "studytime", "failures", "famrel", "freetime", "goout",
            "Dalc", "Walc", "health", "absences")

# the 13 further covariates that complete the 20 adopted ones
DEFAULT_POOL = (
    "school", "sex", "age", "address", "famsize", "traveltime", "studytime",
    "failures", "activities", "nursery", "higher", "internet", "famrel",
)

UCI_COLUMNS = (
    "school", "sex", "age", "address", "famsize", "Pstatus", "Medu", "Fedu", "Mjob",
    "Fjob", "reason", "guardian", "traveltime", "studytime", "failures", "schoolsup",
    "famsup", "paid", "activities", "nursery", "higher", "internet", "romantic",
    "famrel", "freetime", "goout", "Dalc", "Walc", "health", "absences", "G1", "G2", "G3",
)

MAX_REGENERATIONS = 1000


class IngestionError(DomainError):
    """Input file does not follow the expected schema."""


def encode_student_frame(raw: pd.DataFrame, pool=DEFAULT_POOL) -> Dataset:
    """Encode a raw UCI frame: the 7 selected covariates first, then ``pool``."""
    needed = {RESPONSE, *(col for col, _ in SELECTED.values()), *pool}
    missing = sorted(needed - set(raw.columns))
    if missing:
        raise IngestionError(f"student data is missing columns: {missing}")
    out = {}
    for name, (col, enc) in SELECTED.items():
        out[name] = enc(raw[col]).astype(float)
    for col in pool:
        if col in SELECTED:
            raise IngestionError(f"pool covariate {col!r} is one of the selected covariates")
        if col in _BINARY_CODES:
            out[col] = raw[col].eq(_BINARY_CODES[col]).astype(float)
        elif col in _YES_NO:
            out[col] = raw[col].eq("yes").astype(float)
        elif col in _NUMERIC:
            out[col] = pd.to_numeric(raw[col], errors="coerce").astype(float)
        else:
            raise IngestionError(f"covariate {col!r} is nominal or unknown and cannot be encoded")
    frame = pd.DataFrame(out)
    frame[RESPONSE] = pd.to_numeric(raw[RESPONSE], errors="coerce")
    if frame.isna().any().any():
        raise IngestionError("student data contains missing or non-numeric entries")
    return Dataset.from_frame(frame, RESPONSE)


def load_student_data(path, pool=DEFAULT_POOL) -> Dataset:
    """Read the semicolon-separated UCI ``student-por.csv`` and encode it."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"student data file not found: {path}")
    raw = pd.read_csv(path, sep=";", encoding="utf-8")
    return encode_student_frame(raw, pool)


@dataclass(frozen=True)
class StabilityConfig:
    data_path: str
    n_covariate_sets: int = 10
    replicates: int = 500
    selected_covariates: tuple[str, ...] = SELECTED_NAMES
    seed: int = 0
    alpha: float = 0.05
    pool: tuple[str, ...] = DEFAULT_POOL
    rank_tol: float = 3e-3

    def __post_init__(self):
        object.__setattr__(self, "selected_covariates", tuple(self.selected_covariates))
        object.__setattr__(self, "pool", tuple(self.pool))
        if self.n_covariate_sets < 2:
            raise DomainError("n_covariate_sets must be >= 2")
        if self.replicates < 1:
            raise DomainError("replicates must be >= 1")
        if tuple(sorted(self.selected_covariates)) != tuple(sorted(SELECTED_NAMES)):
            raise DomainError(f"selected_covariates must be {list(SELECTED_NAMES)}")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if len(self.pool) < 1:
            raise DomainError("pool must name at least one covariate")


@dataclass
class StabilityResult:
    config: StabilityConfig
    method1: np.ndarray
    method2: np.ndarray
    calibrated_length: np.ndarray
    naive_length: np.ndarray
    regenerations: int
    labels: tuple[str, ...] = field(default=SELECTED_NAMES)

    def similarity_rows(self) -> list[dict]:
        rows = []
        for name, sims in (("Method 1", self.method1), ("Method 2", self.method2)):
            row = {"method": name, "K": self.config.n_covariate_sets}
            for ell, value in enumerate(sims.mean(axis=0), start=1):
                row[f"l{ell}"] = float(value)
            rows.append(row)
        return rows

    def length_rows(self) -> list[dict]:
        rows = []
        for kind, lengths in (("calibrated", self.calibrated_length), ("naive", self.naive_length)):
            for j, name in enumerate(self.labels):
                lo, hi = quantile_band(lengths[:, j])
                rows.append({
                    "covariate": name, "kind": kind, "K": self.config.n_covariate_sets,
                    "mean": float(lengths[:, j].mean()), "q025": lo, "q975": hi,
                })
        return rows


def top_set_similarity(score1, score2) -> np.ndarray:
    """``|S1 cap S2| / l`` for the top-``l`` sets by descending score, ``l = 1..L``."""
    order1 = np.argsort(-np.asarray(score1), kind="stable")
    order2 = np.argsort(-np.asarray(score2), kind="stable")
    L = len(order1)
    return np.array([len(set(order1[:l]) & set(order2[:l])) / l for l in range(1, L + 1)])


def _draw_sets(
    rng: np.random.Generator, splits: list[Dataset], n_selected: int, K: int
) -> tuple[list[tuple[int, ...]], int]:
    """``K`` distinct random adjustment sets that fit on every split."""
    n_pool = splits[0].values.shape[1] - n_selected
    base = tuple(range(n_selected))
    sets: list[tuple[int, ...]] = []
    regenerations = 0
    while len(sets) < K:
        if regenerations > MAX_REGENERATIONS:
            raise CollinearityError(f"could not draw {K} usable covariate sets in {MAX_REGENERATIONS} tries")
        extra = np.flatnonzero(rng.random(n_pool) < 0.5) + n_selected
        candidate = base + tuple(int(i) for i in extra)
        if extra.size == 0 or candidate in sets:
            regenerations += 1
            continue
        try:
            for part in splits:
                fit_all_coefficients(part, candidate)
        except CollinearityError:
            regenerations += 1
            continue
        sets.append(candidate)
    return sets, regenerations


def _fit_split(part: Dataset, sets, n_selected: int):
    coefs, influences = [], []
    for s in sets:
        coef, inf = fit_all_coefficients(part, s)
        coefs.append(coef[:n_selected])
        influences.append(inf[:, :n_selected])
    return np.array(coefs), np.stack(influences, axis=2)  # (K, L), (n, L, K)


def _method1(coefs, influences, pick: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    coef = coefs[pick]
    inf = influences[:, :, pick]
    se = np.sqrt(((inf - inf.mean(axis=0)) ** 2).mean(axis=0) / n)
    return np.abs(coef) / se, se


def _method2(coefs, influences, n: int, alpha: float, rank_tol: float) -> tuple[np.ndarray, np.ndarray]:
    L = coefs.shape[1]
    scores, ses = np.empty(L), np.empty(L)
    for j in range(L):
        bundle = EstimatorBundle.from_influence(coefs[:, j], influences[:, j, :])
        try:
            res = calibrated_ci(bundle, alpha, rank_tol=rank_tol)
        except SingularMatrixError:
            # the K sets carry one direction only for this covariate; skip decorrelation
            res = calibrated_ci(bundle, alpha, auto_decorrelate=False)
        ses[j] = res.delta_hat * math.sqrt(res.pooled_var / n)
        scores[j] = abs(res.theta_w) / ses[j]
    return scores, ses


def run_stability_replicate(data: Dataset, config: StabilityConfig, rep: int):
    """One split: similarities of both methods, split-1 interval lengths, regenerations."""
    rng = RandomStream(config.seed, rep).generator()
    n_sel = len(SELECTED_NAMES)
    perm = rng.permutation(data.n)
    half = data.n // 2
    splits = [data.subset(np.sort(perm[:half])), data.subset(np.sort(perm[half:]))]
    sets, regen = _draw_sets(rng, splits, n_sel, config.n_covariate_sets)
    picks = rng.integers(0, len(sets), size=2)
    z2 = 2 * gaussian_quantile(1 - config.alpha / 2)
    m1, m2, lengths = [], [], None
    for s, part in enumerate(splits):
        coefs, infl = _fit_split(part, sets, n_sel)
        score1, se1 = _method1(coefs, infl, int(picks[s]), part.n)
        score2, se2 = _method2(coefs, infl, part.n, config.alpha, config.rank_tol)
        m1.append(score1)
        m2.append(score2)
        if s == 0:
            lengths = (z2 * se2, z2 * se1)
    return (top_set_similarity(*m1), top_set_similarity(*m2), lengths[0], lengths[1], regen)


def run_stability_experiment(config: StabilityConfig, data: Dataset | None = None) -> StabilityResult:
    """Table of mean top-``l`` similarities per method plus interval-length samples."""
    if data is None:
        data = load_student_data(config.data_path, config.pool)
    order = [data.index(c) for c in SELECTED_NAMES] + [data.index(c) for c in config.pool]
    data = Dataset(tuple(data.column_names[i] for i in order), data.values[:, order],
                   data.response, data.response_name)
    out = [run_stability_replicate(data, config, rep) for rep in range(config.replicates)]
    m1, m2, cal, naive, regen = zip(*out)
    return StabilityResult(config, np.array(m1), np.array(m2), np.array(cal), np.array(naive), int(sum(regen)))


def config_dict(config: StabilityConfig) -> dict:
    out = asdict(config)
    out["selected_covariates"] = list(config.selected_covariates)
    out["pool"] = list(config.pool)
    return out

