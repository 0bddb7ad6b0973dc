import json
import math

import numpy as np
import pytest
from scipy import stats

from distcal.perturbation import (
    NO_PERTURBATION,
    DegeneratePerturbationError,
    InfeasibleEpsilonError,
    Model,
    PerturbationSpec,
    WeightLaw,
    discrete_delta_dist_sq,
    sample_binned,
    sample_cluster,
    sample_discrete_exchangeable,
    sample_resample,
    true_delta,
    variance_law_probe,
)
from distcal.stats_core import DomainError, RandomStream

PROBS = np.round(np.arange(0.1, 1.0, 0.1), 10)


def uniform_sampler(rng, size):
    return rng.random(size)


def identity_map(u):
    return u[:, 0]


def uniform_ball_sampler(rng, anchors, eps):
    lo = np.clip(anchors - eps, 0, 1)
    hi = np.clip(anchors + eps, 0, 1)
    return lo + (hi - lo) * rng.random(anchors.shape)


def within_se(values, target, k):
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / math.sqrt(values.size)
    return abs(values.mean() - target) <= k * se


def var_ratio_check(means, target_var, k=3.0):
    """Sample variance of ``means`` against ``target_var`` within ``k`` standard errors."""
    c = means - means.mean()
    sq = c**2
    var = sq.sum() / (len(means) - 1)
    se = sq.std(ddof=1) / math.sqrt(len(means))
    return abs(var - target_var) <= k * se, var, se


class TestWeightLaw:
    def test_constant(self):
        law = WeightLaw()
        assert law.mean == 1.0 and law.second_moment == 1.0

    def test_gamma_moments(self):
        law = WeightLaw.gamma(2.0, 3.0)
        assert law.mean == 6.0
        assert law.second_moment == pytest.approx(2 * 9 + 36)

    def test_json(self):
        for law in (WeightLaw(), WeightLaw.gamma(1.5, 0.5)):
            assert WeightLaw.from_json(json.loads(json.dumps(law.to_json()))) == law

    def test_invalid(self):
        with pytest.raises(DomainError):
            WeightLaw.gamma(0.0, 1.0)
        with pytest.raises(DomainError):
            WeightLaw.from_json({"beta": [1, 2]})


class TestSpec:
    def test_json_round_trip(self):
        spec = PerturbationSpec(Model.BINNED, m=7, weight_law=WeightLaw.gamma(1, 1), selection_prob=0.25, dim=2)
        text = json.dumps(spec.to_json())
        assert PerturbationSpec.from_json(text) == spec
        assert set(spec.to_json()) >= {"model", "m", "weight_law", "selection_prob", "epsilon", "concentration"}

    def test_from_json_rejects_unknown(self):
        with pytest.raises(DomainError):
            PerturbationSpec.from_json({"model": "Resample", "m": 3, "bogus": 1})
        with pytest.raises(DomainError):
            PerturbationSpec.from_json({"model": "Nope"})

    @pytest.mark.parametrize("kwargs", [
        {"m": 0}, {"epsilon": -1.0}, {"selection_prob": 0.0}, {"concentration": 0.0},
        {"model": Model.DISCRETE, "m": 1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            PerturbationSpec(**kwargs)

    def test_binned_scm(self):
        spec = PerturbationSpec.binned_scm(200)
        assert spec.dim == 6 and spec.n_cells == 200**6
        assert spec.selection_prob == pytest.approx(200.0**-5)


class TestTrueDelta:
    def test_none(self):
        for n in (1, 10, 10**6):
            assert true_delta(NO_PERTURBATION, n) == 1.0

    def test_scm_binned(self):
        assert true_delta(PerturbationSpec.binned_scm(200), 1000) == pytest.approx(math.sqrt(11), rel=1e-6)

    def test_resample(self):
        assert true_delta(PerturbationSpec(Model.RESAMPLE, m=500), 1000) == pytest.approx(math.sqrt(3))
        assert true_delta(PerturbationSpec(Model.RESAMPLE, m=250), 500) ** 2 == pytest.approx(3.0)

    def test_cluster(self):
        assert true_delta(PerturbationSpec(Model.CLUSTER, m=100, epsilon=0.1), 100) == pytest.approx(math.sqrt(2))

    def test_discrete_unsupported(self):
        with pytest.raises(DomainError):
            true_delta(PerturbationSpec(Model.DISCRETE, m=4), 10)


class TestBinned:
    def test_constant_weights_is_iid(self):
        spec = PerturbationSpec(Model.BINNED, m=10)
        x = sample_binned(spec, identity_map, 4000, RandomStream(1)).data
        assert stats.kstest(x, "uniform").pvalue > 0.01

    def test_single_bin_is_base_law(self):
        spec = PerturbationSpec(Model.BINNED, m=1, weight_law=WeightLaw.gamma(1, 1))
        x = sample_binned(spec, identity_map, 4000, RandomStream(2)).data
        assert stats.kstest(x, "uniform").pvalue > 0.01

    def test_binned_variance_inflation(self):
        # Gamma(1, 1) weights with m = n: delta^2 = 1 + Var(W) / E[W]^2 = 2
        n = m = 200
        spec = PerturbationSpec(Model.BINNED, m=m, weight_law=WeightLaw.gamma(1, 1))
        means = np.array([sample_binned(spec, identity_map, n, RandomStream(3, r)).data.mean() for r in range(5000)])
        assert true_delta(spec, n) ** 2 == pytest.approx(2.0)
        ok, var, se = var_ratio_check(means, 2.0 / 12 / n)
        assert ok, (var, se)
        assert within_se(means, 0.5, 4)

    def test_thinned_multidimensional_variance(self):
        n, m = 100, 30
        spec = PerturbationSpec(Model.BINNED, m=m, weight_law=WeightLaw.gamma(1, 1), selection_prob=1 / m, dim=2)
        d2 = true_delta(spec, n) ** 2
        assert d2 == pytest.approx(1 + n / m**2 * (2 * m - 1))
        means = np.array([sample_binned(spec, identity_map, n, RandomStream(4, r)).data.mean() for r in range(5000)])
        ok, var, se = var_ratio_check(means, d2 / 12 / n)
        assert ok, (var, se, d2 / 12 / n)

    def test_sparse_route(self):
        spec = PerturbationSpec.binned_scm(50)
        s = sample_binned(spec, lambda u: u, 500, RandomStream(5))
        assert s.data.shape == (500, 6)
        assert np.all((s.latent >= 0) & (s.latent < 1))

    def test_degenerate(self):
        spec = PerturbationSpec(Model.BINNED, m=2, weight_law=WeightLaw.gamma(1, 1), selection_prob=1e-9)
        with pytest.raises(DegeneratePerturbationError):
            sample_binned(spec, identity_map, 10, RandomStream(6))

    def test_shared_realization_deterministic(self):
        spec = PerturbationSpec(Model.BINNED, m=20, weight_law=WeightLaw.gamma(1, 1))
        a = sample_binned(spec, identity_map, 50, RandomStream(7, 1)).data
        b = sample_binned(spec, identity_map, 50, RandomStream(7, 1)).data
        assert np.array_equal(a, b)
        assert len(a) == 50


class TestResample:
    def test_delta_sq_two(self):
        n = m = 1000
        reps = [sample_resample(m, uniform_sampler, n, RandomStream(8, r)).data for r in range(5000)]
        for psi, var_base in ((lambda x: x, 1 / 12), (lambda x: x**2, 4 / 45), (lambda x: x < 0.3, 0.21)):
            means = np.array([np.mean(psi(x)) for x in reps])
            ok, var, se = var_ratio_check(means, 2 * var_base / n)
            assert ok, (var, se)

    def test_pivot_normal(self):
        n = m = 1000
        means = np.array([sample_resample(m, uniform_sampler, n, RandomStream(9, r)).data.mean() for r in range(2000)])
        z = (means - 0.5) / math.sqrt(2 / 12 / n)
        assert stats.kstest(z, "norm").pvalue > 0.01

    def test_delta_three(self):
        n, m = 500, 250
        means = np.array([sample_resample(m, uniform_sampler, n, RandomStream(10, r)).data.mean() for r in range(5000)])
        ok, var, se = var_ratio_check(means, 3 / 12 / n)
        assert ok, (var, se)

    def test_large_m_approaches_iid(self):
        n = 50
        means = np.array([sample_resample(10**5, uniform_sampler, n, RandomStream(11, r)).data.mean()
                          for r in range(3000)])
        ok, var, se = var_ratio_check(means, (1 + n / 1e5) / 12 / n)
        assert ok

    def test_unbiased(self):
        means = [sample_resample(20, uniform_sampler, 30, RandomStream(12, r)).data.mean() for r in range(5000)]
        assert within_se(means, 0.5, 4)


class TestCluster:
    def test_huge_epsilon_is_iid(self):
        x = sample_cluster(5, 10.0, uniform_sampler, 3000, RandomStream(13)).data
        assert stats.kstest(x, "uniform").pvalue > 0.01

    def test_single_cluster_tight(self):
        x = sample_cluster(1, 1e-3, uniform_sampler, 200, RandomStream(14)).data
        assert np.ptp(x) <= 2e-3

    def test_variance_doubles(self):
        n = m = 200
        means = np.array([
            sample_cluster(m, 1e-4, uniform_sampler, n, RandomStream(15, r), uniform_ball_sampler).data.mean()
            for r in range(5000)
        ])
        ok, var, se = var_ratio_check(means, 2 / 12 / n)
        assert ok, (var, se)
        assert within_se(means, 0.5, 4)

    def test_rejection_matches_conditional(self):
        a = sample_cluster(3, 0.05, uniform_sampler, 400, RandomStream(16)).data
        assert len(a) == 400
        # every row sits within epsilon of one of at most three anchors
        rows = np.sort(a)
        gaps = np.diff(rows)
        assert np.sum(gaps > 0.1) <= 2

    def test_infeasible(self):
        def square(rng, size):
            return rng.random((size, 2))

        with pytest.raises(InfeasibleEpsilonError):
            sample_cluster(1, 1e-6, square, 5, RandomStream(17))

    def test_invalid_epsilon(self):
        with pytest.raises(DomainError):
            sample_cluster(2, 0.0, uniform_sampler, 5, RandomStream(18))


class TestDiscrete:
    def test_closed_form_two_categories(self):
        assert discrete_delta_dist_sq(2, 1.0) == pytest.approx(1 / 3)
        s = sample_discrete_exchangeable(2, 1.0, 10, RandomStream(19))
        assert s.delta_dist**2 == pytest.approx(1 / 3)
        assert set(np.unique(s.data)) <= {1, 2}

    def test_concentration_limit(self):
        assert discrete_delta_dist_sq(5, 1e9) < 1e-9

    def test_dirichlet_variance_oracle(self):
        # K^2 / (K - 1) * Var(xi_1) with the Dirichlet marginal Beta(c, (K-1)c)
        for K, c in ((2, 1.0), (5, 0.3), (10, 2.0)):
            var_xi = stats.beta(c, (K - 1) * c).var()
            assert discrete_delta_dist_sq(K, c) == pytest.approx(K**2 / (K - 1) * var_xi, rel=1e-12)

    def test_sample_mean_variance_formula(self):
        K, c, n = 6, 0.5, 40
        p = 1 / K
        var_s1 = n * p * (1 - p) * (n + K * c) / (1 + K * c)  # Dirichlet-multinomial marginal
        var_psi = (K**2 - 1) / 12  # psi(k) = k on uniform {1..K}
        target = K**2 / (n**2 * (K - 1)) * var_s1 * var_psi
        draws = [sample_discrete_exchangeable(K, c, n, RandomStream(20, r)).data for r in range(6000)]
        means = np.array([d.mean() for d in draws])
        ok, var, se = var_ratio_check(means, target)
        assert ok, (var, se, target)
        counts = np.array([(d == 1).sum() for d in draws])
        ok, var, se = var_ratio_check(counts.astype(float), var_s1)
        assert ok
        assert within_se(means, (K + 1) / 2, 4)


class TestVarianceLawProbe:
    def test_none_is_zero(self):
        rows = variance_law_probe(NO_PERTURBATION, [0.2, 0.5], 1000, RandomStream(21))
        assert all(r.variance == 0.0 for r in rows)

    def test_discrete_isotropic(self):
        spec = PerturbationSpec(Model.DISCRETE, m=10, concentration=1.0)
        rows = variance_law_probe(spec, PROBS, 4000, RandomStream(22))
        d2 = discrete_delta_dist_sq(10, 1.0)
        for r in rows:
            assert abs(r.variance / (r.p * (1 - r.p)) - d2) <= 3 * r.std_error / (r.p * (1 - r.p))

    def test_binned_isotropic(self):
        spec = PerturbationSpec(Model.BINNED, m=100, weight_law=WeightLaw.gamma(1, 1))
        rows = variance_law_probe(spec, [0.25, 0.5, 0.75], 4000, RandomStream(23))
        ratios = np.array([r.variance / (r.p * (1 - r.p)) for r in rows])
        ses = np.array([r.std_error / (r.p * (1 - r.p)) for r in rows])
        # Var(W)/E[W]^2 / m for Gamma(1, 1)
        assert np.all(np.abs(ratios - 1 / 100) <= 3 * ses)

    def test_validation(self):
        with pytest.raises(DomainError):
            variance_law_probe(NO_PERTURBATION, [0.5], 999, RandomStream(0))
        with pytest.raises(DomainError):
            variance_law_probe(NO_PERTURBATION, [1.0], 1000, RandomStream(0))
        with pytest.raises(DomainError):
            variance_law_probe(PerturbationSpec(Model.DISCRETE, m=3), [0.5], 1000, RandomStream(0))
