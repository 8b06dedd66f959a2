import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from poisson_disorder.phase_type import (
    BeliefPoint,
    DimensionError,
    PhaseTypeGenerator,
    build_erlang,
    build_hyperexponential,
    discounted_survival,
    distribution,
    mean_absorption,
    sample_absorption,
    sample_absorption_batch,
    validate_generator,
)


def erlang2_cdf(lam, t):
    # Independent oracle: two-stage chain at rate lam has cdf 1 - e^{-lt}(1+lt).
    return 1.0 - math.exp(-lam * t) * (1.0 + lam * t)


class TestValidation:
    def test_erlang_chain_is_valid(self):
        gen = PhaseTypeGenerator(R=[[-3.0, 3.0], [0.0, -3.0]], r=[0.0, 3.0])
        assert validate_generator(gen).ok

    def test_broken_row_sum_is_flagged_with_residual(self):
        gen = PhaseTypeGenerator(R=[[-3.0, 3.0], [0.0, -3.0]], r=[0.0, 2.0])
        report = validate_generator(gen)
        assert not report.ok
        [violation] = [v for v in report.violations if "R.1 + r" in v]
        assert "row 1" in violation and "-1" in violation

    def test_singular_sub_generator_is_flagged(self):
        gen = PhaseTypeGenerator(R=[[-3.0, 3.0], [3.0, -3.0]], r=[0.0, 0.0])
        report = validate_generator(gen)
        assert any("singular" in v for v in report.violations)

    def test_dimension_mismatch_is_structural(self):
        with pytest.raises(DimensionError):
            PhaseTypeGenerator(R=[[-3.0, 3.0], [0.0, -3.0]], r=[3.0])
        with pytest.raises(DimensionError):
            PhaseTypeGenerator(R=[[-3.0, 3.0, 0.0], [0.0, -3.0, 0.0]], r=[0.0, 3.0])


class TestBeliefPoint:
    def test_clamps_tiny_negative_and_renormalizes(self):
        pi = BeliefPoint([1.0 + 1e-12, -1e-12, 0.0])
        assert pi.vec.min() >= 0.0
        assert pi.vec.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_large_violations(self):
        with pytest.raises(ValueError):
            BeliefPoint([1.1, -0.1, 0.0])
        with pytest.raises(ValueError):
            BeliefPoint([0.5, 0.4, 0.0])


class TestDistribution:
    def test_single_state_at_time_zero(self):
        gen = build_erlang(1, 3.0)
        d = distribution(gen, BeliefPoint([1.0, 0.0]), 0.0)
        assert d.cdf == pytest.approx(0.0, abs=1e-14)
        assert d.density == pytest.approx(3.0, rel=1e-12)
        assert d.hazard == pytest.approx(3.0, rel=1e-12)

    def test_fully_absorbed_reports_sentinel(self):
        gen = build_erlang(2, 3.0)
        d = distribution(gen, BeliefPoint([0.0, 0.0, 1.0]), 0.7)
        assert d.cdf == 1.0
        assert d.absorbed
        assert math.isinf(d.hazard)

    def test_erlang_cdf_matches_closed_form(self):
        gen = build_erlang(2, 3.0)
        pi = BeliefPoint([1.0, 0.0, 0.0])
        for t in [0.1, 0.5, 1.0, 2.5]:
            assert distribution(gen, pi, t).cdf == pytest.approx(
                erlang2_cdf(3.0, t), abs=1e-12
            )

    def test_negative_time_rejected(self):
        gen = build_erlang(2, 3.0)
        with pytest.raises(ValueError):
            distribution(gen, BeliefPoint([1.0, 0.0, 0.0]), -0.1)


class TestMeanAbsorption:
    def test_fully_absorbed_is_zero(self):
        gen = build_erlang(2, 3.0)
        assert mean_absorption(gen, BeliefPoint([0.0, 0.0, 1.0])) == 0.0

    def test_erlang_two_stages(self):
        gen = build_erlang(2, 3.0)
        assert mean_absorption(gen, BeliefPoint([1.0, 0.0, 0.0])) == pytest.approx(2 / 3)

    def test_hyperexponential_mixture(self):
        gen = build_hyperexponential([3.0, 2.0])
        pi = BeliefPoint([0.5, 0.5, 0.0])
        assert mean_absorption(gen, pi) == pytest.approx(0.5 / 3 + 0.5 / 2)

    def test_matches_survival_integral(self):
        # mean = integral of the survival function, by quadrature.
        gen = build_hyperexponential([3.0, 2.0])
        pi = BeliefPoint([0.3, 0.5, 0.2])
        survival = lambda t: 1.0 - distribution(gen, pi, t).cdf
        integral, _ = integrate.quad(survival, 0.0, 60.0, limit=300)
        assert mean_absorption(gen, pi) == pytest.approx(integral, rel=1e-6)


class TestDiscountedSurvival:
    def test_zero_rate_is_total_probability(self):
        gen = build_erlang(2, 3.0)
        for pi in [BeliefPoint([1, 0, 0]), BeliefPoint([0.2, 0.3, 0.5])]:
            for t in [0.0, 0.4, 2.0]:
                assert discounted_survival(gen, pi, 0.0, t) == pytest.approx(1.0, abs=1e-12)

    def test_fully_absorbed_is_pure_discount(self):
        gen = build_erlang(2, 3.0)
        pi = BeliefPoint([0.0, 0.0, 1.0])
        assert discounted_survival(gen, pi, 1.0, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-12)

    def test_matches_monte_carlo(self):
        # E[exp(-(1 - T)^+)] for the two-stage prior against a large sample.
        gen = build_erlang(2, 3.0)
        pi = BeliefPoint([1.0, 0.0, 0.0])
        rng = np.random.default_rng(20240817)
        theta = rng.exponential(1 / 3, size=10**6) + rng.exponential(1 / 3, size=10**6)
        sample = np.exp(-np.clip(1.0 - theta, 0.0, None))
        se = sample.std(ddof=1) / math.sqrt(sample.size)
        value = discounted_survival(gen, pi, 1.0, 1.0)
        assert abs(value - sample.mean()) < 3 * se

    def test_matches_quadrature_oracle(self):
        gen = build_hyperexponential([3.0, 2.0])
        pi = BeliefPoint([0.4, 0.4, 0.2])
        rho, t = -1.5, 0.8

        def integrand(s):
            return math.exp(-rho * (t - s)) * distribution(gen, pi, s).density

        conv, _ = integrate.quad(integrand, 0.0, t, limit=200)
        expected = (1.0 - distribution(gen, pi, t).cdf) + pi.absorbed * math.exp(-rho * t) + conv
        assert discounted_survival(gen, pi, rho, t) == pytest.approx(expected, rel=1e-9)


class TestSampling:
    def test_fully_absorbed_always_zero(self):
        gen = build_erlang(2, 3.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            state, theta = sample_absorption(gen, BeliefPoint([0, 0, 1]), rng)
            assert state == 2 and theta == 0.0

    def test_erlang_sample_mean(self):
        gen = build_erlang(2, 3.0)
        pi = BeliefPoint([1.0, 0.0, 0.0])
        _, theta = sample_absorption_batch(gen, pi, 10**5, np.random.default_rng(7))
        se = theta.std(ddof=1) / math.sqrt(theta.size)
        assert abs(theta.mean() - 2 / 3) < 3 * se

    def test_empirical_cdf_matches(self):
        gen = build_hyperexponential([3.0, 2.0])
        pi = BeliefPoint([0.5, 0.5, 0.0])
        _, theta = sample_absorption_batch(gen, pi, 10**5, np.random.default_rng(11))
        t0 = 0.5
        emp = (theta <= t0).mean()
        ref = distribution(gen, pi, t0).cdf
        se = math.sqrt(ref * (1 - ref) / theta.size)
        assert abs(emp - ref) < 3 * se

    def test_kolmogorov_smirnov_against_cdf(self):
        gen = build_erlang(2, 3.0)
        pi = BeliefPoint([0.6, 0.4, 0.0])
        _, theta = sample_absorption_batch(gen, pi, 10**4, np.random.default_rng(3))
        theta.sort()
        grid_cdf = np.array([distribution(gen, pi, t).cdf for t in theta])
        k = np.arange(1, theta.size + 1)
        ks = np.maximum(k / theta.size - grid_cdf, grid_cdf - (k - 1) / theta.size).max()
        assert ks < 1.63 / math.sqrt(theta.size)  # 99% critical value

    def test_scalar_and_batch_same_law(self):
        gen = build_hyperexponential([3.0, 2.0])
        pi = BeliefPoint([0.3, 0.3, 0.4])
        rng = np.random.default_rng(5)
        draws = np.array([sample_absorption(gen, pi, rng)[1] for _ in range(4000)])
        assert (draws == 0).mean() == pytest.approx(0.4, abs=0.03)


class TestBuilders:
    def test_erlang_matrices(self):
        gen = build_erlang(2, 3.0)
        assert np.allclose(gen.R, [[-3.0, 3.0], [0.0, -3.0]])
        assert np.allclose(gen.r, [0.0, 3.0])
        assert validate_generator(gen).ok

    def test_hyperexponential_matrices(self):
        gen = build_hyperexponential([3.0, 2.0])
        assert np.allclose(gen.R, [[-3.0, 0.0], [0.0, -2.0]])
        assert np.allclose(gen.r, [3.0, 2.0])
        assert validate_generator(gen).ok

    def test_single_stage_is_exponential(self):
        gen = build_erlang(1, 2.5)
        pi = BeliefPoint([1.0, 0.0])
        for t in [0.2, 1.0]:
            assert distribution(gen, pi, t).cdf == pytest.approx(1 - math.exp(-2.5 * t))

    def test_rejects_bad_rates(self):
        with pytest.raises(ValueError):
            build_erlang(0, 1.0)
        with pytest.raises(ValueError):
            build_erlang(2, -1.0)
        with pytest.raises(ValueError):
            build_hyperexponential([1.0, 0.0])


def random_generators():
    # Every state absorbs at rate >= 0.05, which guarantees nonsingularity.
    return st.integers(1, 4).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.lists(st.floats(0.0, 2.0), min_size=n * n, max_size=n * n),
            st.lists(st.floats(0.05, 3.0), min_size=n, max_size=n),
        )
    )


@given(random_generators(), st.floats(0.01, 5.0))
@settings(max_examples=40, deadline=None)
def test_distribution_properties(spec, t):
    n, off, r = spec
    R = np.array(off).reshape(n, n)
    np.fill_diagonal(R, 0.0)
    R -= np.diag(R.sum(axis=1) + np.array(r))
    gen = PhaseTypeGenerator(R=R, r=np.array(r))
    assert validate_generator(gen).ok
    rng = np.random.default_rng(0)
    pi = BeliefPoint(rng.dirichlet(np.ones(n + 1)))
    d = distribution(gen, pi, t)
    assert 0.0 <= d.cdf <= 1.0
    assert d.density >= -1e-12
    # cdf nondecreasing and consistent with the density.
    h = 1e-5
    d_plus = distribution(gen, pi, t + h)
    assert d_plus.cdf >= d.cdf - 1e-12
    assert (d_plus.cdf - d.cdf) / h == pytest.approx(d.density, rel=2e-4, abs=1e-5)
    # discounted survival at rate 0 is exact.
    assert discounted_survival(gen, pi, 0.0, t) == pytest.approx(1.0, abs=1e-12)
