import numpy as np
import pytest

from rdextrap.errors import DimensionMismatch, SingularSystem, WeakDenominator, ZeroOutsideOption
from rdextrap.ident import (N_TERMS, PreferenceEstimator, _relative, calibrate_location_effects,
                            counting_rule, delta_method_se, equation_coefficients, first_stage,
                            preference_jacobian, solve_eta, solve_preferences, solve_two_district,
                            term_outcomes, two_district_jacobian)
from rdextrap.rdd import RddSample, fuzzy_rd_known_first_stage


def _consistent_theta(rng, a, g, M, chi=1.0):
    t = rng.normal(0, 0.3, (M, N_TERMS))
    _, psi, xi = equation_coefficients(t, chi)
    t[:, 0] = a * psi + g * xi
    return t


def test_two_district_closed_form_recovers(rng):
    for _ in range(20):
        a, g = rng.uniform(0.1, 1.0, 2)
        t = _consistent_theta(rng, a, g, 2).ravel()
        assert np.allclose(solve_two_district(t), [a, g], rtol=1e-9)
        assert np.allclose(solve_preferences(t.reshape(2, -1))[:2], [a, g], rtol=1e-9)


def test_two_district_jacobian_matches_finite_differences(rng):
    t = _consistent_theta(rng, 0.55, 0.35, 2).ravel()
    J = two_district_jacobian(t)
    num = np.empty_like(J)
    for i in range(18):
        e = np.zeros(18)
        e[i] = 1e-6
        num[:, i] = (np.array(solve_two_district(t + e)) - np.array(solve_two_district(t - e))) / 2e-6
    assert np.max(np.abs(J - num)) / np.max(np.abs(J)) < 1e-6
    assert np.allclose(preference_jacobian(t.reshape(2, -1)), J, rtol=1e-8, atol=1e-10)


def test_general_jacobian_matches_finite_differences(rng):
    t = _consistent_theta(rng, 0.4, 0.25, 5) + rng.normal(0, 0.01, (5, N_TERMS))
    Jm = preference_jacobian(t, chi=0.7)
    flat = t.ravel()
    num = np.empty_like(Jm)
    for i in range(flat.size):
        e = np.zeros(flat.size)
        e[i] = 1e-6
        hi = solve_preferences((flat + e).reshape(t.shape), 0.7)[:2]
        lo = solve_preferences((flat - e).reshape(t.shape), 0.7)[:2]
        num[:, i] = (np.array(hi) - np.array(lo)) / 2e-6
    assert np.max(np.abs(Jm - num)) / np.max(np.abs(Jm)) < 1e-6


def test_overidentified_exact_system_has_zero_residual(rng):
    t = _consistent_theta(rng, 0.3, 0.8, 6, chi=0.5)
    a, g, res = solve_preferences(t, chi=0.5)
    assert (a, g) == pytest.approx((0.3, 0.8)) and res < 1e-12


def test_delta_method_zero_covariance(rng):
    t = _consistent_theta(rng, 0.55, 0.35, 2).ravel()
    ses, cov = delta_method_se(t, np.zeros((18, 18)))
    assert np.all(ses == 0) and np.all(cov == 0)
    ses, _ = delta_method_se(t, np.eye(18) * 1e-4)
    assert np.all(ses > 0)
    with pytest.raises(DimensionMismatch):
        delta_method_se(t, np.eye(9))


def test_singular_systems():
    with pytest.raises(SingularSystem):
        solve_preferences(np.ones((1, N_TERMS)))
    with pytest.raises(SingularSystem):
        solve_preferences(np.ones((3, N_TERMS)))
    assert not counting_rule(1, 4) and counting_rule(2, 4) and counting_rule(5, 4)


def test_relative_indexing():
    arr = np.arange(10).reshape(2, 5)
    out = _relative(arr, np.array([0, 3]))
    assert out[0].tolist() == [0, 1, 2, 3, 4] and out[1].tolist() == [8, 9, 5, 6, 7]


def test_spending_change_lands_in_referendum_district(dataset):
    F = first_stage(dataset)
    dG = _relative(np.log(dataset.post.G) - np.log(dataset.pre.G), dataset.district)
    assert np.allclose(dG[:, 0], F)
    assert np.allclose(dG[:, 1:], 0.0)
    t = term_outcomes(dataset, 0, [0])
    assert np.all(t[~dataset.approved] == 0.0)
    sample = RddSample(dataset.margin, dG[:, 0], F)
    assert fuzzy_rd_known_first_stage(sample, h=0.1).estimate == pytest.approx(1.0)


def test_estimator_recovers_truth(fitted, economy):
    est = fitted.estimate_
    a = economy.alpha / economy.theta
    g = economy.gamma / economy.theta
    assert np.allclose(est.a, a, atol=0.02)
    assert np.allclose(est.g, g, atol=0.02)
    assert est.eta == pytest.approx(economy.eta, abs=0.02)
    assert est.cov.shape == (2 * economy.n_types,) * 2
    assert np.allclose(est.zeta[0::2], est.a)
    assert 0.0 <= est.shrinkage <= 1.0


def test_unshrunk_ses_are_smaller(dataset):
    shrunk = PreferenceEstimator().fit(dataset).estimate_
    raw = PreferenceEstimator(shrink=False).fit(dataset).estimate_
    assert np.allclose(raw.a, shrunk.a) and np.allclose(raw.g, shrunk.g)
    assert np.all(raw.se_a <= shrunk.se_a)


def _eta_design(rng, n=3000):
    s = rng.uniform(-0.5, 0.5, n)
    d = s >= 0
    dlogG = rng.uniform(0.05, 0.4, n)
    F = np.where(d, dlogG, 0.0)
    dP = F * 0.3 + 0.02 * s + rng.normal(0, 0.01, n)
    dH = 0.6 * dP + rng.normal(0, 0.005, n)
    return s, F, dP, dH


def _eta(s, F, dP, dH, h=0.15):
    P = fuzzy_rd_known_first_stage(RddSample(s, dP, F), h=h)
    H = fuzzy_rd_known_first_stage(RddSample(s, dH, F), h=h)
    return solve_eta(H, P)


def test_solve_eta_identities(rng):
    s, F, dP, dH = _eta_design(rng)
    assert _eta(s, F, dP, dP) == pytest.approx((1.0, 0.0), abs=1e-10)
    eta, se = _eta(s, F, dP, dH)
    assert abs(eta - 0.6) < 4 * se
    zero = fuzzy_rd_known_first_stage(RddSample(s, np.zeros_like(s), F), h=0.15)
    with pytest.raises(WeakDenominator):
        solve_eta(zero, zero)


def test_solve_eta_se_matches_monte_carlo():
    rng = np.random.default_rng(7)
    draws, ses = [], []
    for _ in range(400):
        eta, se = _eta(*_eta_design(rng))
        draws.append(eta)
        ses.append(se)
    assert np.mean(ses) == pytest.approx(np.std(draws, ddof=1), rel=0.1)


def test_location_effects_round_trip(economy, state):
    loc = calibrate_location_effects(state.Nk, economy.alpha / economy.theta,
                                     economy.gamma / economy.theta, state.P, state.tau,
                                     economy.G, economy.y, economy.sigma, economy.chi, economy.eta)
    theta = float(economy.theta[0])
    assert np.allclose(economy.theta, theta)
    assert np.allclose(loc.A_bar, economy.A_bar / theta, atol=1e-8)
    assert np.allclose(loc.A_by_type, loc.A_bar[None, :], atol=1e-8)
    assert np.allclose(loc.B, economy.B - economy.B.mean(), atol=1e-8)
    assert abs(loc.B.mean()) < 1e-12
    assert loc.lam == pytest.approx(economy.lam + economy.B.mean(), abs=1e-8)
    full = np.asarray(economy.sigma)[:, None] * np.ones((1, economy.n_jurisdictions))
    with pytest.raises(ZeroOutsideOption):
        calibrate_location_effects(full, economy.alpha, economy.gamma, state.P, state.tau,
                                   economy.G, economy.y, economy.sigma)
