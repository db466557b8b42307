import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import quartic_moments, sample_quartic, symbolic_crossing
from selforg.criticality import (
    BoltzmannFit, CriticalPointEstimator, FitError, InsufficientSamplesError, NoSignChangeError, bootstrap_b,
    crossing, crossing_gradient, fit_boltzmann, interpolate_critical, noise_correction,
)


def test_fit_matches_moment_equations():
    # at the maximum-likelihood point the model moments equal the sample moments
    x = sample_quartic(-1.0, 0.5, 4000, np.random.default_rng(0))
    f = fit_boltzmann(x)
    m2, m4 = quartic_moments(f.b_coeff_, f.d_coeff_)
    assert m2 == pytest.approx(np.mean(x**2), rel=1e-5)
    assert m4 == pytest.approx(np.mean(x**4), rel=1e-5)


@pytest.mark.parametrize("b,d", [(1.0, 0.1), (0.0, 1.0), (-2.0, 1.0), (-6.0, 2.0)])
def test_recovers_parameters_on_large_samples(b, d):
    x = sample_quartic(b, d, 200000, np.random.default_rng(1))
    f = fit_boltzmann(x)
    assert f.b_coeff_ == pytest.approx(b, abs=0.05 * max(1, abs(b)))
    assert f.d_coeff_ == pytest.approx(d, rel=0.1)  # weak quartic: sd(D) ~ 3% at this size
    assert f.bimodal == (b < 0)
    if b < 0:
        assert f.maxima[1] == pytest.approx(math.sqrt(-b / (2 * d)), rel=0.03)


def test_density_normalised():
    f = fit_boltzmann(sample_quartic(-1.0, 1.0, 2000, np.random.default_rng(2)))
    grid = np.linspace(-6, 6, 20001)
    assert np.trapezoid(f.pdf(grid), grid) == pytest.approx(1.0, abs=1e-6)
    assert f.cdf(np.array([-50.0, 50.0])) == pytest.approx([0.0, 1.0], abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_scale_covariance(scale, seed):
    x = sample_quartic(-1.0, 0.7, 600, np.random.default_rng(seed))
    a, b = fit_boltzmann(x), fit_boltzmann(scale * x)
    assert b.b_coeff_ * scale**2 == pytest.approx(a.b_coeff_, rel=1e-6, abs=1e-8)
    assert b.d_coeff_ * scale**4 == pytest.approx(a.d_coeff_, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_sign_flip_invariance(seed):
    x = sample_quartic(0.5, 0.5, 300, np.random.default_rng(seed))
    a, b = fit_boltzmann(x), fit_boltzmann(-x)
    assert b.b_coeff_ == pytest.approx(a.b_coeff_, rel=1e-9, abs=1e-12)
    assert b.d_coeff_ == pytest.approx(a.d_coeff_, rel=1e-9)


def test_fit_errors():
    with pytest.raises(InsufficientSamplesError):
        fit_boltzmann(np.ones(10))
    with pytest.raises(FitError):
        fit_boltzmann(np.zeros(100))
    with pytest.raises(FitError):
        fit_boltzmann(np.r_[np.ones(60), -np.ones(60)])


def test_sklearn_shape():
    est = BoltzmannFit(domain_sigmas=7.0)
    assert est.get_params()["domain_sigmas"] == 7.0
    x = sample_quartic(0.3, 0.3, 500, np.random.default_rng(3))
    est.fit(x.reshape(-1, 1))
    assert est.score(x) == pytest.approx(np.mean(est.score_samples(x)))


def test_bootstrap_deterministic_and_flagging():
    x = sample_quartic(-1.0, 1.0, 400, np.random.default_rng(4))
    a = bootstrap_b(x, 10, np.random.default_rng(0))
    b = bootstrap_b(x, 10, np.random.default_rng(0))
    assert a == b and not a.flagged and a.std > 0
    # |x| constant: every refit is degenerate
    bad = bootstrap_b(np.r_[np.ones(40), -np.ones(40)], 10, np.random.default_rng(0))
    assert bad.flagged and bad.n_failed == 10 and math.isnan(bad.mean)


@settings(max_examples=100, deadline=None)
@given(
    o1=st.floats(1.0, 100.0), do=st.floats(0.1, 50.0), b1=st.floats(1e-3, 10.0), b2=st.floats(-10.0, -1e-3),
)
def test_crossing_and_gradient_match_symbolic(o1, do, b1, b2):
    o2 = o1 + do
    ref, grad = symbolic_crossing(o1, b1, o2, b2)
    assert crossing(o1, b1, o2, b2) == pytest.approx(ref, rel=1e-10)
    for got, want in zip(crossing_gradient(o1, b1, o2, b2), grad):
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12 * (abs(o1) + abs(o2)))


def test_interpolate_critical_cases():
    est = interpolate_critical([(10, 1.0, 0.1), (20, -1.0, 0.1), (30, -2.0, 0.1)])
    assert est.omega_c == pytest.approx(15.0)
    with pytest.raises(NoSignChangeError):
        interpolate_critical([(10, 1.0), (20, 0.5)])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        est = interpolate_critical([(10, 1.0), (20, -1.0), (30, 1.0), (40, -1.0)])
    assert est.n_crossings == 2 and est.omega_c == pytest.approx(15.0)
    assert any("changes sign" in str(x.message) for x in w)


def test_error_propagation_by_hand():
    est = interpolate_critical([(10.0, 2.0, 0.2), (20.0, -1.0, 0.3)], sigma_omega_frac=0.1)
    g = crossing_gradient(10.0, 2.0, 20.0, -1.0)
    var = (g[0] * 0.2) ** 2 + (g[1] * 0.3) ** 2 + (g[2] * 1.0) ** 2 + (g[3] * 2.0) ** 2
    assert est.sigma_stat == pytest.approx(math.sqrt(var), rel=1e-12)


def test_estimator_recovers_synthetic_critical_point():
    rng = np.random.default_rng(8)
    omegas = np.linspace(0.6, 1.4, 9)
    sets = [sample_quartic(3.0 * (1 - o), 1.0, 10000, rng) for o in omegas]
    est = CriticalPointEstimator(random_state=1).fit(omegas, sets)
    assert est.omega_c_ == pytest.approx(1.0, abs=0.05)
    assert len(est.table_) == 9


def test_noise_correction_identity_at_zero_noise():
    rng = np.random.default_rng(9)
    omegas = np.linspace(0.7, 1.3, 4)
    fits = [(o, fit_boltzmann(sample_quartic(2 * (1 - o), 1.0, 2000, rng))) for o in omegas]
    nc = noise_correction(fits, 0.0)
    assert nc.factor == 1.0 and nc.reliable
    with pytest.raises(ValueError):
        noise_correction(fits, -0.1)
