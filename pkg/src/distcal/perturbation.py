"""Random distributional perturbation models.

Each sampler first realizes a random perturbation ``xi`` of a base law and then
draws ``n`` rows i.i.d. from the perturbed law.  All rows of one sample share
the same realization of ``xi``, which is what makes sample means more variable
than under i.i.d. sampling by a factor ``delta**2``.

Models
------
BinnedWeights
    The latent unit cube ``[0, 1]**dim`` is cut into ``m**dim`` equal cells;
    every cell gets an i.i.d. random weight (optionally thinned by an
    independent Bernoulli selection), and points are drawn with probability
    proportional to the weights, then mapped through the base law's
    latent-to-data map.
Resample
    The perturbed law is the empirical measure of ``m`` base draws.
Cluster
    The perturbed law is a mixture of the base law conditioned on
    ``epsilon``-balls around ``m`` base draws.
DiscreteExchangeable
    Uniform law on ``{1, ..., K}`` reweighted by symmetric Dirichlet weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, NamedTuple

import numpy as np

from .stats_core import DomainError, RandomStream

BaseSampler = Callable[[np.random.Generator, int], np.ndarray]
LatentMap = Callable[[np.ndarray], np.ndarray]

# dense cell enumeration above this many cells is replaced by sparse selection
_MAX_DENSE_CELLS = 1_000_000
_MIN_ACCEPTANCE = 1e-6
_REJECTION_BUDGET = 2_000_000


class DegeneratePerturbationError(ArithmeticError):
    """Every realized cell weight is zero, so the perturbed law is undefined."""


class InfeasibleEpsilonError(ValueError):
    """Rejection sampling for a cluster ball accepts too rarely."""


class Model(str, Enum):
    BINNED = "BinnedWeights"
    RESAMPLE = "Resample"
    CLUSTER = "Cluster"
    DISCRETE = "DiscreteExchangeable"
    NONE = "None"


@dataclass(frozen=True)
class WeightLaw:
    """Law of a single cell weight: ``Gamma(shape, scale)`` or a constant."""

    kind: str = "constant"
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gamma", "constant"):
            raise DomainError(f"unknown weight law {self.kind!r}")
        if self.kind == "gamma" and not (self.shape > 0 and self.scale > 0):
            raise DomainError("gamma weight law needs positive shape and scale")

    @classmethod
    def gamma(cls, shape: float = 1.0, scale: float = 1.0) -> "WeightLaw":
        return cls("gamma", float(shape), float(scale))

    @property
    def mean(self) -> float:
        return self.shape * self.scale if self.kind == "gamma" else 1.0

    @property
    def second_moment(self) -> float:
        if self.kind == "gamma":
            return self.shape * (self.shape + 1.0) * self.scale**2
        return 1.0

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "gamma":
            return rng.gamma(self.shape, self.scale, size=size)
        return np.ones(size)

    def to_json(self) -> Any:
        return {"gamma": [self.shape, self.scale]} if self.kind == "gamma" else "constant"

    @classmethod
    def from_json(cls, obj: Any) -> "WeightLaw":
        if obj == "constant":
            return cls()
        if isinstance(obj, dict) and set(obj) == {"gamma"}:
            shape, scale = obj["gamma"]
            return cls.gamma(shape, scale)
        raise DomainError(f"cannot parse weight law {obj!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    """Which perturbation model to apply, with its parameters.

    ``m`` is the per-axis bin count (BinnedWeights), the pool size
    (Resample, Cluster) or the category count (DiscreteExchangeable).
    ``dim`` is the latent dimension of the binned model; the cube has
    ``m**dim`` cells.  ``selection_prob`` thins cell weights to ``Z * W`` with
    ``Z ~ Bernoulli(selection_prob)``; unselected cells carry no mass.
    """

    model: Model = Model.NONE
    m: int = 1
    weight_law: WeightLaw = field(default_factory=WeightLaw)
    selection_prob: float = 1.0
    epsilon: float = 0.0
    concentration: float = 1.0
    dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if self.m < 1:
            raise DomainError("m must be >= 1")
        if self.dim < 1:
            raise DomainError("dim must be >= 1")
        if not 0.0 < self.selection_prob <= 1.0:
            raise DomainError("selection_prob must lie in (0, 1]")
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")
        if self.concentration <= 0:
            raise DomainError("concentration must be positive")
        if self.model is Model.DISCRETE and self.m < 2:
            raise DomainError("DiscreteExchangeable needs K = m >= 2 categories")

    @property
    def n_cells(self) -> int:
        return self.m**self.dim

    @classmethod
    def binned_scm(cls, m: int, p: int = 5, weight_law: WeightLaw | None = None) -> "PerturbationSpec":
        """Joint-support binning for ``p`` covariates plus a response.

        ``m**(p + 1)`` cells with selection probability ``m**-p``, so that about
        ``m`` cells carry the whole perturbed mass.
        """
        return cls(
            Model.BINNED,
            m=m,
            weight_law=weight_law or WeightLaw.gamma(1.0, 1.0),
            selection_prob=float(m) ** (-p),
            dim=p + 1,
        )

    def to_json(self) -> dict:
        return {
            "model": self.model.value,
            "m": self.m,
            "weight_law": self.weight_law.to_json(),
            "selection_prob": self.selection_prob,
            "epsilon": self.epsilon,
            "concentration": self.concentration,
            "dim": self.dim,
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "PerturbationSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        known = {"model", "m", "weight_law", "selection_prob", "epsilon", "concentration", "dim"}
        unknown = set(obj) - known
        if unknown:
            raise DomainError(f"unknown perturbation fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "weight_law" in kwargs:
            kwargs["weight_law"] = WeightLaw.from_json(kwargs["weight_law"])
        try:
            kwargs["model"] = Model(kwargs.get("model", "None"))
        except ValueError as exc:
            raise DomainError(str(exc)) from None
        return cls(**kwargs)


@dataclass
class PerturbedSample:
    data: np.ndarray
    spec: PerturbationSpec
    base_label: str
    stream: RandomStream
    latent: np.ndarray | None = None
    delta_dist: float | None = None

    def __len__(self) -> int:
        return len(self.data)


NO_PERTURBATION = PerturbationSpec()


def _binned_cells(spec: PerturbationSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Realize cell weights. Returns per-axis indices (cells x dim) and positive weights."""
    m, dim, q = spec.m, spec.dim, spec.selection_prob
    n_cells = spec.n_cells
    if n_cells <= _MAX_DENSE_CELLS:
        w = spec.weight_law.draw(rng, n_cells)
        if q < 1.0:
            w = w * (rng.random(n_cells) < q)
        keep = np.flatnonzero(w > 0)
        axes = np.stack(np.unravel_index(keep, (m,) * dim), axis=1)
        return axes, w[keep]
    if q >= 1.0:
        raise DomainError(f"{n_cells} cells without thinning is too many to enumerate")
    if n_cells >= 2**63:
        raise DomainError("cell count exceeds 64-bit range")
    # sparse route: Binomial count of selected cells, then a uniform set of that size
    count = int(rng.binomial(n_cells, q))
    axes = np.empty((0, dim), dtype=np.int64)
    while len(axes) < count:
        fresh = rng.integers(0, m, size=(count - len(axes), dim))
        axes = np.unique(np.concatenate([axes, fresh]), axis=0)
    # np.unique sorts rows, so the chosen set does not depend on draw order
    w = spec.weight_law.draw(rng, count)
    keep = w > 0
    return axes[keep], w[keep]


def sample_binned(
    spec: PerturbationSpec,
    base_inverse_cdf: LatentMap,
    n: int,
    stream: RandomStream,
    base_label: str = "base",
) -> PerturbedSample:
    """Draw ``n`` rows from the randomly reweighted binned law.

    ``base_inverse_cdf`` maps an ``(n, dim)`` array of latent uniforms to data
    rows; uniform latents give the base law.
    """
    if spec.model is not Model.BINNED:
        raise DomainError(f"sample_binned needs a BinnedWeights spec, got {spec.model.value}")
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = stream.generator()
    axes, w = _binned_cells(spec, rng)
    if w.size == 0 or not np.isfinite(w.sum()) or w.sum() <= 0:
        raise DegeneratePerturbationError("all realized cell weights are zero")
    chosen = rng.choice(len(w), size=n, p=w / w.sum())
    latent = (axes[chosen] + rng.random((n, spec.dim))) / spec.m
    return PerturbedSample(np.asarray(base_inverse_cdf(latent)), spec, base_label, stream, latent=latent)


def sample_resample(
    m: int, base_sampler: BaseSampler, n: int, stream: RandomStream, base_label: str = "base"
) -> PerturbedSample:
    """Draw ``n`` rows with replacement from a pool of ``m`` base draws."""
    if m < 1 or n < 1:
        raise DomainError("m and n must be >= 1")
    rng = stream.generator()
    pool = np.asarray(base_sampler(rng, m))
    rows = pool[rng.integers(0, m, size=n)]
    spec = PerturbationSpec(Model.RESAMPLE, m=m)
    return PerturbedSample(rows, spec, base_label, stream)


def _reject_near(
    anchor: np.ndarray, count: int, epsilon: float, base_sampler: BaseSampler, rng: np.random.Generator
) -> np.ndarray:
    accepted: list[np.ndarray] = []
    have = tried = 0
    batch = max(64, 4 * count)
    while have < count:
        prop = np.asarray(base_sampler(rng, batch))
        flat = prop.reshape(batch, -1)
        ok = np.linalg.norm(flat - anchor.reshape(1, -1), axis=1) <= epsilon
        tried += batch
        if ok.any():
            accepted.append(prop[ok])
            have += int(ok.sum())
        if tried >= _REJECTION_BUDGET and have / tried < _MIN_ACCEPTANCE:
            raise InfeasibleEpsilonError(
                f"acceptance rate {have / tried:.2e} below {_MIN_ACCEPTANCE:g} for epsilon={epsilon:g}"
            )
        rate = max(have / tried, 1.0 / tried)
        batch = int(min(_REJECTION_BUDGET, max(64, 1.5 * (count - have) / rate)))
    return np.concatenate(accepted)[:count]


def sample_cluster(
    m: int,
    epsilon: float,
    base_sampler: BaseSampler,
    n: int,
    stream: RandomStream,
    base_conditional_sampler: Callable[[np.random.Generator, np.ndarray, float], np.ndarray] | None = None,
    base_label: str = "base",
) -> PerturbedSample:
    """Draw ``n`` rows from the base law conditioned on balls around ``m`` anchors.

    Each row picks an anchor uniformly.  ``base_conditional_sampler(rng,
    anchors, epsilon)``, when given, must return one draw per anchor row from
    the base law restricted to the ``epsilon``-ball; otherwise rejection
    sampling from ``base_sampler`` is used.
    """
    if m < 1 or n < 1:
        raise DomainError("m and n must be >= 1")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    rng = stream.generator()
    anchors = np.asarray(base_sampler(rng, m))
    pick = rng.integers(0, m, size=n)
    if base_conditional_sampler is not None:
        rows = np.asarray(base_conditional_sampler(rng, anchors[pick], epsilon))
    else:
        rows = np.empty((n,) + anchors.shape[1:], dtype=float)
        for j in np.unique(pick):
            where = np.flatnonzero(pick == j)
            rows[where] = _reject_near(anchors[j], len(where), epsilon, base_sampler, rng)
    spec = PerturbationSpec(Model.CLUSTER, m=m, epsilon=epsilon)
    return PerturbedSample(rows, spec, base_label, stream)


def discrete_delta_dist_sq(K: int, concentration: float) -> float:
    """``K**2 / (K - 1) * Var(xi_1)`` for symmetric Dirichlet weights, i.e. ``1 / (K c + 1)``."""
    var_xi = (K - 1) / (K**2 * (K * concentration + 1.0))
    return K**2 / (K - 1) * var_xi


def sample_discrete_exchangeable(
    K: int, concentration: float, n: int, stream: RandomStream
) -> PerturbedSample:
    """Categories ``1..K`` drawn with symmetric-Dirichlet random probabilities."""
    if K < 2:
        raise DomainError("K must be >= 2")
    if concentration <= 0 or n < 1:
        raise DomainError("concentration must be positive and n >= 1")
    rng = stream.generator()
    xi = rng.dirichlet(np.full(K, float(concentration)))
    rows = rng.choice(K, size=n, p=xi) + 1
    spec = PerturbationSpec(Model.DISCRETE, m=K, concentration=concentration)
    return PerturbedSample(
        rows, spec, f"uniform{{1..{K}}}", stream, delta_dist=math.sqrt(discrete_delta_dist_sq(K, concentration))
    )


def true_delta(spec: PerturbationSpec, n: int) -> float:
    """Asymptotic variance-inflation factor ``delta`` for sample size ``n``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if spec.model is Model.NONE:
        return 1.0
    if spec.model in (Model.RESAMPLE, Model.CLUSTER):
        return math.sqrt(1.0 + n / spec.m)
    if spec.model is Model.BINNED:
        law, q = spec.weight_law, spec.selection_prob
        # relative variance of Z * W with Z ~ Bernoulli(q)
        rel_var = law.second_moment / (q * law.mean**2) - 1.0
        return math.sqrt(1.0 + n / spec.n_cells * rel_var)
    raise DomainError(f"true_delta is not defined for {spec.model.value}; use delta_dist from the sample")


class ProbeRow(NamedTuple):
    p: float
    variance: float
    std_error: float


def _perturbed_event_probs(spec: PerturbationSpec, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One realization of ``P^xi([0, p))`` in latent-uniform coordinates, for each p."""
    if spec.model is Model.NONE:
        return probs.copy()
    if spec.model is Model.DISCRETE:
        K = spec.m
        xi = rng.dirichlet(np.full(K, spec.concentration))
        cum = np.concatenate([[0.0], np.cumsum(xi)])
        return cum[np.rint(probs * K).astype(int)]
    if spec.model is Model.BINNED:
        axes, w = _binned_cells(spec, rng)
        if w.size == 0:
            raise DegeneratePerturbationError("all realized cell weights are zero")
        lo = axes[:, 0] / spec.m
        overlap = np.clip(probs[:, None] - lo[None, :], 0.0, 1.0 / spec.m) * spec.m
        return overlap @ w / w.sum()
    if spec.model is Model.RESAMPLE:
        pool = rng.random(spec.m)
        return (pool[None, :] < probs[:, None]).mean(axis=1)
    if spec.model is Model.CLUSTER:
        a = rng.random(spec.m)
        lo, hi = np.clip(a - spec.epsilon, 0, 1), np.clip(a + spec.epsilon, 0, 1)
        inside = np.clip(probs[:, None], lo[None, :], hi[None, :]) - lo[None, :]
        return (inside / (hi - lo)[None, :]).mean(axis=1)
    raise DomainError(f"unsupported model {spec.model.value}")


def variance_law_probe(
    spec: PerturbationSpec, event_probs, replicates: int, stream: RandomStream
) -> list[ProbeRow]:
    """Monte Carlo variance of ``P^xi(A_p)`` over realizations of ``xi``.

    ``A_p`` is the latent-uniform event ``[0, p)`` (first latent axis for
    ``dim > 1``); for the discrete model it is the union of the first ``p K``
    categories, so ``p K`` must be an integer.
    """
    if replicates < 1000:
        raise DomainError("variance_law_probe needs at least 1000 replicates")
    probs = np.asarray(event_probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise DomainError("event probabilities must lie in (0, 1)")
    if spec.model is Model.DISCRETE and not np.allclose(probs * spec.m, np.rint(probs * spec.m)):
        raise DomainError("for the discrete model every p * K must be an integer")
    rng = stream.generator()
    draws = np.stack([_perturbed_event_probs(spec, probs, rng) for _ in range(replicates)])
    shifted = draws - draws[0]  # exact zeros when xi has no effect
    centered = shifted - shifted.mean(axis=0)
    var = (centered**2).sum(axis=0) / (replicates - 1)
    se = (centered**2).std(axis=0, ddof=1) / math.sqrt(replicates)
    return [ProbeRow(float(p), float(v), float(s)) for p, v, s in zip(probs, var, se)]
