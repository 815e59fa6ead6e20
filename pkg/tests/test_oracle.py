import math

import numpy as np
import pytest
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from hetbayes.core import Dataset, SufficientStats
from hetbayes.dgp import DgpSpec
from hetbayes.errors import QuadratureUnderflow
from hetbayes.estimators import estimate_mu, estimate_sigma, estimate_sigma2
from hetbayes.mixture import DiscreteMixture
from hetbayes.numerics import normal_quantile
from hetbayes.oracle import OracleSpec, oracle_batch, oracle_estimates, oracle_posterior

J = 15
K = 7.0

CAL_DGP = DgpSpec(alpha=0.0, nu=0.018, kappa=29.39130434782609,
                  lam=0.008846153846153846, rho_copula=-0.3814)


def mc_oracle(target, y, s2, dgp, j_count, n_draws, seed):
    """Monte Carlo posterior mean by a route disjoint from the quadrature path.

    Draws the variance-driving normal only; conditional on it the mean prior
    is Gaussian and conjugate with the Gaussian likelihood, so the mean
    dimension integrates analytically (Rao-Blackwellization). The Gamma
    quantile transform uses scipy's own inverse.
    """
    from scipy.special import gammaincinv
    rng = np.random.default_rng(seed)
    xi2 = rng.standard_normal(n_draws)
    p = np.clip(norm.cdf(xi2), 1e-16, 1 - 1e-16)
    sigma2 = gammaincinv(dgp.kappa, p) * dgp.lam
    sigma = np.sqrt(sigma2)
    k = (j_count - 1) / 2.0
    m_b = dgp.alpha + math.sqrt(dgp.nu) * dgp.rho_copula * xi2
    v_b = dgp.nu * (1.0 - dgp.rho_copula**2)
    noise = sigma2 / j_count
    logw = (norm.logpdf(y, loc=m_b, scale=np.sqrt(v_b + noise))
            + gamma_dist.logpdf(s2, a=k, scale=sigma2 / k))
    w = np.exp(logw - logw.max())
    w /= w.sum()
    if target == "mu":
        g = (m_b / v_b + y * j_count / sigma2) / (1.0 / v_b + j_count / sigma2)
    elif target == "sigma":
        g = sigma
    else:
        g = sigma2
    return float(w @ g)


def test_discrete_single_atom_exact():
    G = DiscreteMixture([1.0], [0.4], [0.9], J)
    spec = OracleSpec(prior=G)
    assert oracle_posterior("mu", 1.2, 0.3, spec) == pytest.approx(0.4, abs=1e-12)
    assert oracle_posterior("sigma", 1.2, 0.3, spec) == pytest.approx(0.9, abs=1e-12)
    assert oracle_posterior("sigma2", 1.2, 0.3, spec) == pytest.approx(0.81, abs=1e-12)
    assert oracle_posterior("q", 1.2, 0.3, spec, alpha=0.1) == pytest.approx(
        0.4 + 0.9 * normal_quantile(0.1), abs=1e-12)


def test_discrete_kind_agrees_with_estimators():
    rng = np.random.default_rng(40)
    for _ in range(10):
        m = int(rng.integers(2, 7))
        w = rng.dirichlet(np.ones(m))
        G = DiscreteMixture(w, rng.normal(0, 0.5, m), rng.uniform(0.3, 1.2, m), J)
        spec = OracleSpec(prior=G)
        y = rng.normal(0, 0.7)
        s2 = rng.uniform(0.08, 1.5)
        assert oracle_posterior("mu", y, s2, spec) == pytest.approx(
            estimate_mu(y, s2, G, 0.0), abs=1e-9)
        assert oracle_posterior("sigma", y, s2, spec) == pytest.approx(
            estimate_sigma(y, s2, G, 0.0), abs=1e-9)
        assert oracle_posterior("sigma2", y, s2, spec) == pytest.approx(
            estimate_sigma2(y, s2, G, 0.0), abs=1e-9)


def test_copula_degenerate_prior_returns_alpha():
    dgp = DgpSpec(alpha=0.37, nu=1e-12, kappa=1e6, lam=0.26e-6, rho_copula=0.0)
    spec = OracleSpec(prior=dgp, j_count=J)
    for y, s2 in [(0.0, 0.2), (1.0, 0.4), (-0.5, 0.3)]:
        assert oracle_posterior("mu", y, s2, spec) == pytest.approx(0.37, abs=1e-5)


def test_copula_quadrature_vs_monte_carlo():
    spec = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    rng = np.random.default_rng(41)
    for i in range(3):
        # posterior means bounded away from zero so a relative check is meaningful
        y = float(rng.uniform(0.25, 0.5) * rng.choice([-1.0, 1.0]))
        s2 = float(rng.uniform(0.2, 0.33))
        for target in ("mu", "sigma2"):
            gh = oracle_posterior(target, y, s2, spec)
            mc = mc_oracle(target, y, s2, CAL_DGP, J, 200_000, seed=100 + i)
            assert gh == pytest.approx(mc, rel=2e-3)


def test_quadrature_node_doubling_stable():
    spec40 = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    spec80 = OracleSpec(prior=CAL_DGP, nodes=(80, 80), j_count=J)
    for y, s2 in [(0.0, 0.26), (0.2, 0.2), (-0.3, 0.35)]:
        for target in ("mu", "sigma", "sigma2"):
            a = oracle_posterior(target, y, s2, spec40)
            b = oracle_posterior(target, y, s2, spec80)
            denom = max(abs(b), 1e-12)
            assert abs(a - b) / denom <= 1e-4


def test_oracle_jensen():
    spec = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    rng = np.random.default_rng(42)
    for _ in range(10):
        y = rng.normal(0, 0.3)
        s2 = rng.uniform(0.1, 0.6)
        assert oracle_posterior("sigma2", y, s2, spec) >= \
            oracle_posterior("sigma", y, s2, spec) ** 2 - 1e-12


def test_oracle_estimates_identical_units():
    stats = [SufficientStats("a", 0.1, 0.3, J), SufficientStats("b", 0.1, 0.3, J)]
    ds = Dataset(units=stats)
    spec = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    out = oracle_estimates(ds, spec, alpha_list=(0.1,))
    assert out[0].mu_hat == out[1].mu_hat
    assert out[0].q_hat[0.1] == out[1].q_hat[0.1]
    assert out[0].method == "ORACLE"
    assert out[0].q_hat[0.1] == pytest.approx(
        out[0].mu_hat + out[0].sigma_hat * normal_quantile(0.1), abs=1e-12)


def test_oracle_batch_matches_pointwise():
    stats = [SufficientStats(f"u{i}", 0.05 * i - 0.2, 0.2 + 0.03 * i, J) for i in range(8)]
    spec = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    batch = oracle_batch(stats, spec, alpha_list=(0.1,))
    for i, s in enumerate(stats):
        assert batch.mu_hat[i] == pytest.approx(
            oracle_posterior("mu", s.y_bar, s.s2, spec), rel=1e-12)


def test_quadrature_underflow_raises():
    spec = OracleSpec(prior=CAL_DGP, nodes=(40, 40), j_count=J)
    with pytest.raises(QuadratureUnderflow):
        oracle_posterior("mu", 1e160, 0.26, spec)


def test_oracle_spec_validation():
    with pytest.raises(ValueError):
        OracleSpec(prior=CAL_DGP, nodes=(4, 40), j_count=J)
    with pytest.raises(ValueError):
        OracleSpec(prior=CAL_DGP)  # copula prior needs j_count
    with pytest.raises(ValueError):
        oracle_posterior("unknown", 0.0, 0.2, OracleSpec(prior=CAL_DGP, j_count=J))
