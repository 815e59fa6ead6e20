import math

import numpy as np
import pytest
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from hetbayes.core import SufficientStats
from hetbayes.dgp import DgpSpec, draw_parameters, draw_sufficient_stats
from hetbayes.errors import EmptyData, NumericalFailure, UnknownUnit
from hetbayes.estimators import estimate_sigma2
from hetbayes.npmle import (SieveConfig, build_sieve_grid, default_order, em_weights,
                            fit_loo_npmle, fit_npmle, loo_weights_batch,
                            prepare_grid, resolve_sigma_lower)

J = 15


def make_stats(rng, n, mu_sd=0.3, sigma=0.6):
    y = rng.normal(0.0, mu_sd, n)
    s2 = sigma**2 * rng.chisquare(J - 1, n) / (J - 1)
    return [SufficientStats(f"u{i}", float(a), float(b), J) for i, (a, b) in enumerate(zip(y, s2))]


def test_order_rule():
    assert default_order(100) == 10
    assert default_order(4000) == 64
    assert default_order(2) == 2


def test_grid_n100_shape():
    rng = np.random.default_rng(0)
    stats = make_stats(rng, 100)
    atoms = build_sieve_grid(stats, SieveConfig())
    assert 2 <= len(atoms) <= 10
    mus = sorted({a.mu for a in atoms})
    sigmas = sorted({a.sigma for a in atoms})
    assert len(mus) * len(sigmas) == len(atoms)
    assert len(sigmas) == 3 and len(mus) == 3


def test_grid_collapses_when_data_below_sigma_lower():
    rng = np.random.default_rng(1)
    stats = make_stats(rng, 50)
    high = 10.0  # configured bound above every sample s
    atoms = build_sieve_grid(stats, SieveConfig(sigma_lower=high))
    sigmas = {a.sigma for a in atoms}
    assert sigmas == {high}
    assert len(atoms) <= default_order(50)


def test_grid_n4000_inside_data_box():
    rng = np.random.default_rng(2)
    stats = make_stats(rng, 4000)
    atoms = build_sieve_grid(stats, SieveConfig())
    assert len(atoms) <= 64
    y = np.array([s.y_bar for s in stats])
    s = np.sqrt([s2.s2 for s2 in stats])
    lo_sigma = resolve_sigma_lower(s, SieveConfig())
    for a in atoms:
        assert y.min() <= a.mu <= y.max()
        assert max(lo_sigma, s.min()) - 1e-12 <= a.sigma <= s.max() + 1e-12


def test_grid_empty_data():
    with pytest.raises(EmptyData):
        build_sieve_grid([], SieveConfig())


def test_one_em_step_matches_hand_computation():
    # 2 units, 2 atoms; one EM step from uniform weights.
    stats = [SufficientStats("a", -0.2, 0.30, J), SufficientStats("b", 0.4, 0.55, J)]
    mus = np.array([-0.3, 0.5])
    sigmas = np.array([0.5, 0.8])
    k = (J - 1) / 2

    def f(stat, m):
        return (norm.pdf(stat.y_bar, loc=mus[m], scale=sigmas[m] / math.sqrt(J))
                * gamma_dist.pdf(stat.s2, a=k, scale=sigmas[m] ** 2 / k))

    w = np.array([0.5, 0.5])
    expected = np.zeros(2)
    for m in range(2):
        expected[m] = np.mean([w[m] * f(s, m) / (w[0] * f(s, 0) + w[1] * f(s, 1))
                               for s in stats])

    logF = np.array([[math.log(f(s, m)) for m in range(2)] for s in stats])
    w_new, _, iters, _, _ = em_weights(logF, w, max_iters=1, tol=0.0)
    assert iters == 1
    assert np.allclose(w_new, expected, rtol=1e-12, atol=1e-14)


def test_em_monotone_and_simplex():
    rng = np.random.default_rng(3)
    stats = make_stats(rng, 150)
    fit = fit_npmle(stats, SieveConfig())
    assert fit.min_loglik_step >= -1e-12
    assert fit.mixture.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(fit.mixture.weights >= 0.0)
    assert fit.converged


def test_fit_is_deterministic():
    rng = np.random.default_rng(4)
    stats = make_stats(rng, 120)
    f1 = fit_npmle(stats, SieveConfig())
    f2 = fit_npmle(stats, SieveConfig())
    assert np.array_equal(f1.mixture.weights, f2.mixture.weights)
    assert f1.final_loglik == f2.final_loglik


def test_support_containment():
    rng = np.random.default_rng(5)
    stats = make_stats(rng, 300)
    fit = fit_npmle(stats, SieveConfig())
    y = np.array([s.y_bar for s in stats])
    s = np.sqrt([x.s2 for x in stats])
    G = fit.mixture
    pos = G.weights > 0
    assert np.all(np.abs(G.mus[pos]) <= np.abs(y).max() + 1e-12)
    assert np.all(G.sigmas[pos] <= s.max() + 1e-12)


def test_single_atom_truth_recovered():
    # Data simulated from a point-mass prior; the fitted posterior-mean
    # functional for sigma^2 at the data mean lands within 10% of truth.
    mu0, sigma0 = 0.5, math.sqrt(0.26)
    rng = np.random.default_rng(42)
    n = 2000
    y = rng.normal(mu0, sigma0 / math.sqrt(J), n)
    s2 = sigma0**2 * rng.chisquare(J - 1, n) / (J - 1)
    stats = [SufficientStats(f"u{i}", float(a), float(b), J) for i, (a, b) in enumerate(zip(y, s2))]
    fit = fit_npmle(stats, SieveConfig())
    est = estimate_sigma2(float(np.mean(y)), float(np.mean(s2)), fit.mixture, rho=0.0)
    assert abs(est - sigma0**2) / sigma0**2 < 0.10


def test_em_numerical_failure_on_dead_unit():
    logF = np.array([[0.0, -1.0], [-np.inf, -np.inf]])
    with pytest.raises(NumericalFailure):
        em_weights(logF, np.array([0.5, 0.5]), 10, 1e-8)


def test_loo_unknown_unit():
    rng = np.random.default_rng(6)
    stats = make_stats(rng, 30)
    fit = fit_npmle(stats, SieveConfig())
    with pytest.raises(UnknownUnit):
        fit_loo_npmle(stats, fit, "nope", SieveConfig())


def test_loo_two_units_concentrates_on_max_density_atom():
    stats = [SufficientStats("a", -1.0, 0.2, J), SufficientStats("b", 1.0, 0.9, J)]
    config = SieveConfig(loo_max_iters=500)
    fit = fit_npmle(stats, config)
    loo = fit_loo_npmle(stats, fit, "a", config)
    # only unit b remains; its best atom should carry almost all weight
    G = loo.mixture
    per_atom = np.array([
        norm.logpdf(1.0, loc=m, scale=s / math.sqrt(J))
        + gamma_dist.logpdf(0.9, a=G.k, scale=s**2 / G.k)
        for m, s in zip(G.mus, G.sigmas)])
    assert G.weights[np.argmax(per_atom)] > 0.95


def test_loo_duplicated_unit_changes_little():
    rng = np.random.default_rng(7)
    stats = make_stats(rng, 1600)
    stats.append(SufficientStats("dup", stats[0].y_bar, stats[0].s2, J))
    config = SieveConfig()
    fit = fit_npmle(stats, config)
    loo = fit_loo_npmle(stats, fit, "dup", config)
    tv = 0.5 * np.sum(np.abs(loo.mixture.weights - fit.mixture.weights))
    assert tv <= 1e-3
    # Excluding either copy leaves the same data (in a different row order):
    # the refits agree to summation round-off.
    loo_orig = fit_loo_npmle(stats, fit, stats[0].unit_id, config)
    assert np.allclose(loo.mixture.weights, loo_orig.mixture.weights, atol=1e-12)


def test_loo_warm_start_matches_cold_start_loglik():
    rng = np.random.default_rng(8)
    n = 200
    dgp = DgpSpec(alpha=0.0, nu=0.018, kappa=29.391, lam=0.0088462, rho_copula=-0.38)
    truths = draw_parameters(dgp, n, 11)
    stats = draw_sufficient_stats(truths, J, 12)
    config = SieveConfig(loo_max_iters=3000)
    fit = fit_npmle(stats, config)
    exclude = stats[17].unit_id
    warm = fit_loo_npmle(stats, fit, exclude, config)
    rest = [s for s in stats if s.unit_id != exclude]
    # Cold start on the same grid as the full fit: uniform over its atoms.
    problem = prepare_grid(stats, config)
    rest_idx = [i for i, s in enumerate(stats) if s.unit_id != exclude]
    m = problem.mus.size
    w_cold, ll_cold, _, _, _ = em_weights(problem.logF[rest_idx], np.full(m, 1.0 / m),
                                          config.max_em_iters, config.em_tol)
    eta = config.eta_rule(n)
    assert abs(warm.final_loglik - ll_cold) <= 10 * eta


def test_loo_batch_matches_single_refits():
    rng = np.random.default_rng(9)
    stats = make_stats(rng, 40)
    config = SieveConfig(loo_max_iters=200)
    fit = fit_npmle(stats, config)
    problem = prepare_grid(stats, config)
    batch = loo_weights_batch(problem.logF, fit.mixture.weights, config)
    assert batch.min_loglik_step >= -1e-12
    for idx in (0, 7, 39):
        single = fit_loo_npmle(stats, fit, stats[idx].unit_id, config)
        assert np.allclose(batch.weights[idx], single.mixture.weights, atol=1e-10)
        assert batch.logliks[idx] == pytest.approx(single.final_loglik, abs=1e-8)
