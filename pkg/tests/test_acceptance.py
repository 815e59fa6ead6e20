"""Acceptance suite: one test per gate criterion, each at its stated tolerance.

The heavy Monte Carlo experiment (criteria 7-10) runs once as a session
fixture: calibrated DGP, 100 seeded rounds at n in {200, 4000}, with
detection-loss grids at both quantile-of-interest ranges. Expect the full
module to take on the order of 15-30 minutes on two cores.
"""

import math
import time
import warnings

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaincinv
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from hetbayes.cli import EXIT_OK, cli_main
from hetbayes.dgp import MomentTargets, calibrate_dgp, draw_parameter_arrays
from hetbayes.estimators import (estimate_mu, estimate_quantile, estimate_sigma,
                                 estimate_sigma2)
from hetbayes.mixture import (DiscreteMixture, MixtureAtom, mixture_density,
                              mixture_density_dy, tail_integrals)
from hetbayes.numerics import normal_quantile
from hetbayes.oracle import OracleSpec, oracle_posterior
from hetbayes.pipeline import LongRecord, partial_out_covariates
from hetbayes.simulation import ExperimentSpec, run_experiment

J = 15

PAPER_TARGETS = MomentTargets(e_mu=0.0, v_mu=0.018, e_sigma2=0.26,
                              v_sigma2=0.0023, cor_mu_sigma2=-0.38)

TABLE1_SPEC = ExperimentSpec(
    dgp=PAPER_TARGETS,
    n_list=(200, 4000),
    j_count=J,
    rounds=100,
    seed=7,
    estimators=("HET", "HOM", "NAIVE"),
    targets=("mu", "sigma", "sigma2", "q0.1"),
    detection_grids={
        "mu": tuple(np.linspace(-0.3, 0.0, 7)),
        "q0.1": tuple(np.linspace(-1.0, -0.7, 7)),
    },
    threads=2,
)


def _report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def table1():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_experiment(TABLE1_SPEC)
    by_key = {}
    for r in result.reports:
        key = (r.loss, r.target, r.n) if r.loss == "mse" else (r.loss, r.target, r.n, r.threshold)
        by_key[key] = r
    return result, by_key


def test_criterion_01_point_mass_fixed_points():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        mu0 = float(rng.normal(0, 1))
        sigma0 = float(rng.uniform(0.2, 2.0))
        j = int(rng.integers(4, 40))
        y = float(rng.normal(mu0, 1.0))
        s2 = float(rng.uniform(0.05, 3.0))
        alpha = float(rng.uniform(0.02, 0.98))
        G = DiscreteMixture([1.0], [mu0], [sigma0], j)
        worst = max(
            worst,
            abs(estimate_mu(y, s2, G, 0.0) - mu0),
            abs(estimate_sigma(y, s2, G, 0.0) - sigma0),
            abs(estimate_sigma2(y, s2, G, 0.0) - sigma0**2),
            abs(estimate_quantile(y, s2, alpha, G, 0.0)
                - (mu0 + sigma0 * normal_quantile(alpha))),
        )
    elapsed = time.perf_counter() - start
    _report("criterion 1 (point-mass fixed points)",
            worst < 1e-10 and elapsed < 1.0,
            f"worst abs dev {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_tweedie_equals_posterior_weights():
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(2, 11))
        w = rng.dirichlet(np.ones(m))
        G = DiscreteMixture(w, rng.normal(0, 0.5, m), rng.uniform(0.3, 1.2, m), J)
        for _ in range(20):
            y = float(rng.normal(0, 0.8))
            s2 = float(rng.uniform(0.05, 2.0))
            dens = np.array([
                wm * norm.pdf(y, loc=mm, scale=sm / math.sqrt(J))
                * gamma_dist.pdf(s2, a=G.k, scale=sm**2 / G.k)
                for wm, mm, sm in zip(G.weights, G.mus, G.sigmas)])
            p = dens / dens.sum()
            alpha = 0.1
            ref_mu = float(p @ G.mus)
            ref_sigma = float(p @ G.sigmas)
            worst = max(
                worst,
                abs(estimate_mu(y, s2, G, 0.0) - ref_mu),
                abs(estimate_sigma(y, s2, G, 0.0) - ref_sigma),
                abs(estimate_sigma2(y, s2, G, 0.0) - float(p @ G.sigmas**2)),
                abs(estimate_quantile(y, s2, alpha, G, 0.0)
                    - (ref_mu + ref_sigma * normal_quantile(alpha))),
            )
    elapsed = time.perf_counter() - start
    _report("criterion 2 (Tweedie == posterior weights)",
            worst < 1e-9 and elapsed < 5.0,
            f"worst abs dev {worst:.2e}, {elapsed:.2f}s")


def test_criterion_03_derivative_check():
    rng = np.random.default_rng(103)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 7))
        w = rng.dirichlet(np.ones(m))
        G = DiscreteMixture(w, rng.normal(0, 0.5, m), rng.uniform(0.3, 1.2, m), J)
        y = float(rng.normal(0, 0.8))
        s2 = float(rng.uniform(0.08, 1.5))
        analytic = mixture_density_dy(G, y, s2)
        fd = (mixture_density(G, y + h, s2) - mixture_density(G, y - h, s2)) / (2 * h)
        rel = abs(analytic - fd) / max(abs(fd), 1e-300)
        worst = max(worst, rel)
    _report("criterion 3 (analytic dy vs finite differences)",
            worst <= 1e-6, f"worst rel err {worst:.2e} on 100 points")


def test_criterion_04_tail_integral_closed_forms():
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(50):
        j = int(rng.integers(4, 31))
        k = (j - 1) / 2.0
        theta = float(rng.uniform(0.01, 2.0))
        s2 = float(rng.uniform(0.01, 3.0))
        atom = MixtureAtom(weight=1.0, mu=0.0, sigma=math.sqrt(k * theta), k=k, j_count=j)
        t0, thalf = tail_integrals(atom, s2)
        # The integrand decays as exp(-t/theta) past s2; everything beyond
        # s2 + 50*theta is ~e^-50 of the mass, far below the 1e-7 tolerance.
        hi = s2 + 50.0 * theta
        t0_q, _ = integrate.quad(
            lambda t: (s2 / t) ** (k - 1) * gamma_dist.pdf(t, a=k, scale=theta),
            s2, hi, epsabs=0.0, epsrel=1e-10, limit=200)
        thalf_q, _ = integrate.quad(
            lambda u: 2.0 / math.sqrt(k) * (s2 / (s2 + u * u)) ** (k - 1)
            * gamma_dist.pdf(s2 + u * u, a=k, scale=theta),
            0, math.sqrt(50.0 * theta), epsabs=0.0, epsrel=1e-10, limit=200)
        worst = max(worst, abs(t0 - t0_q) / t0_q, abs(thalf - thalf_q) / thalf_q)
    _report("criterion 4 (tail integrals vs quadrature)",
            worst <= 1e-7, f"worst rel err {worst:.2e} on 50 triples")


def test_criterion_05_oracle_quadrature_vs_monte_carlo():
    dgp = calibrate_dgp(PAPER_TARGETS)
    spec40 = OracleSpec(prior=dgp, nodes=(40, 40), j_count=J)
    spec80 = OracleSpec(prior=dgp, nodes=(80, 80), j_count=J)

    # One million prior draws, shared across fixture points; the mean
    # dimension is integrated analytically (conjugacy), so only the
    # variance dimension carries Monte Carlo noise.
    rng = np.random.default_rng(105)
    n_draws = 1_000_000
    xi2 = rng.standard_normal(n_draws)
    p = np.clip(norm.cdf(xi2), 1e-16, 1 - 1e-16)
    sigma2 = gammaincinv(dgp.kappa, p) * dgp.lam
    sigma = np.sqrt(sigma2)
    k = (J - 1) / 2.0
    m_b = dgp.alpha + math.sqrt(dgp.nu) * dgp.rho_copula * xi2
    v_b = dgp.nu * (1.0 - dgp.rho_copula**2)

    fix_rng = np.random.default_rng(106)
    worst_mc = 0.0
    worst_double = 0.0
    for _ in range(10):
        y = float(fix_rng.uniform(0.25, 0.5) * fix_rng.choice([-1.0, 1.0]))
        s2 = float(fix_rng.uniform(0.2, 0.33))
        logw = (norm.logpdf(y, loc=m_b, scale=np.sqrt(v_b + sigma2 / J))
                + gamma_dist.logpdf(s2, a=k, scale=sigma2 / k))
        w = np.exp(logw - logw.max())
        w /= w.sum()
        cond_mu = (m_b / v_b + y * J / sigma2) / (1.0 / v_b + J / sigma2)
        mc = {"mu": float(w @ cond_mu), "sigma": float(w @ sigma),
              "sigma2": float(w @ sigma2)}
        for target in ("mu", "sigma", "sigma2"):
            gh = oracle_posterior(target, y, s2, spec40)
            gh2 = oracle_posterior(target, y, s2, spec80)
            worst_mc = max(worst_mc, abs(gh - mc[target]) / abs(mc[target]))
            worst_double = max(worst_double, abs(gh - gh2) / max(abs(gh2), 1e-12))
    _report("criterion 5 (oracle quadrature vs MC; node doubling)",
            worst_mc <= 1e-3 and worst_double <= 1e-4,
            f"worst GH-vs-MC rel {worst_mc:.2e}, doubling rel {worst_double:.2e}")


def test_criterion_06_calibration_and_round_trip():
    start = time.perf_counter()
    spec = calibrate_dgp(PAPER_TARGETS)
    ok_algebra = (abs(spec.lam - 0.0088462) < 5e-8 and abs(spec.kappa - 29.391) < 5e-4)

    n = 1_000_000
    mu, sig = draw_parameter_arrays(spec, n, 1006)
    s2 = sig**2
    checks = []
    checks.append(abs(np.mean(mu) - 0.0) <= 3 * math.sqrt(0.018 / n))
    v_mu = float(np.var(mu))
    m4_mu = float(np.mean((mu - mu.mean())**4))
    checks.append(abs(v_mu - 0.018) <= 3 * math.sqrt((m4_mu - v_mu**2) / n))
    checks.append(abs(np.mean(s2) - 0.26) <= 3 * math.sqrt(0.0023 / n))
    v_s2 = float(np.var(s2))
    m4_s2 = float(np.mean((s2 - s2.mean())**4))
    checks.append(abs(v_s2 - 0.0023) <= 3 * math.sqrt((m4_s2 - v_s2**2) / n))
    r = float(np.corrcoef(mu, s2)[0, 1])
    checks.append(abs(r - (-0.38)) <= 3 * (1 - 0.38**2) / math.sqrt(n))
    elapsed = time.perf_counter() - start
    _report("criterion 6 (calibration + moment round trip)",
            ok_algebra and all(checks) and elapsed < 30.0,
            f"lam={spec.lam:.7f} kappa={spec.kappa:.3f} moments_ok={checks} {elapsed:.1f}s")


def test_criterion_07_table1_reproduction(table1):
    _, by_key = table1
    r200 = by_key[("mse", "mu", 200)].relative_regret
    r4000 = by_key[("mse", "mu", 4000)].relative_regret
    q4000 = by_key[("mse", "q0.1", 4000)].relative_regret

    ok_a = 0.05 <= r200["HET"] <= 0.20 and 0.8 <= r200["NAIVE"] <= 1.2
    ok_b = (r4000["HET"] <= 0.03 and 0.015 <= r4000["HOM"] <= 0.05
            and 0.85 <= r4000["NAIVE"] <= 1.1)
    ok_c = (q4000["HET"] < q4000["HOM"] < q4000["NAIVE"]
            and q4000["HOM"] >= 3 * q4000["HET"])
    detail = (f"n=200 mu: HET {r200['HET']:.3f} NAIVE {r200['NAIVE']:.3f}; "
              f"n=4000 mu: HET {r4000['HET']:.4f} HOM {r4000['HOM']:.4f} "
              f"NAIVE {r4000['NAIVE']:.3f}; "
              f"n=4000 q0.1: HET {q4000['HET']:.4f} HOM {q4000['HOM']:.4f} "
              f"NAIVE {q4000['NAIVE']:.3f}")
    _report("criterion 7 (Table 1 desk-scale)", ok_a and ok_b and ok_c, detail)


def test_criterion_08_table_a1_sigma2_spot_check(table1):
    _, by_key = table1
    reg = by_key[("mse", "sigma2", 4000)].relative_regret
    ok = reg["HOM"] >= 5 * reg["HET"] and reg["NAIVE"] >= 2.0
    _report("criterion 8 (Table A-1 sigma2 spot check)", ok,
            f"HET {reg['HET']:.4f} HOM {reg['HOM']:.4f} NAIVE {reg['NAIVE']:.3f}")


def test_criterion_09_detection_regret_ordering(table1):
    _, by_key = table1
    failures = []
    for target, grid in TABLE1_SPEC.detection_grids.items():
        for c in grid:
            reg = by_key[("detect", target, 4000, float(c))].relative_regret
            if not reg["NAIVE"] > reg["HET"]:
                failures.append((target, c, reg["HET"], reg["NAIVE"]))
    _report("criterion 9 (detection: NAIVE above HET at every c)",
            not failures, f"violations: {failures!r}" if failures else
            "NAIVE > HET at all 14 grid points")


def test_criterion_10_em_monotonicity(table1):
    result, _ = table1
    step = result.diagnostics["min_loglik_step"]
    _report("criterion 10 (EM monotone across all fits)",
            step >= -1e-12, f"most negative per-step change {step:.2e}")


def test_supplement_oracle_minimality(table1):
    # Spec invariant (not a numbered gate): the oracle's mean loss is the
    # minimum across methods for every target and loss in the shared run.
    result, _ = table1
    violations = [
        (r.loss, r.target, r.n, r.threshold, m, reg)
        for r in result.reports
        for m, reg in r.relative_regret.items()
        if reg < 0.0
    ]
    _report("supplement (oracle minimality over all reports)",
            not violations, f"violations: {violations!r}" if violations else
            f"all {len(result.reports)} reports have nonnegative regrets")


def test_criterion_11_pipeline_and_cli_determinism(tmp_path):
    # Planted-coefficient residualization.
    rng = np.random.default_rng(111)
    beta = np.array([0.5, -0.2])
    records = []
    for i in range(500):
        x = rng.normal(0, 1, (J, 2))
        y = (rng.normal(0, 0.15) + x @ beta
             + math.sqrt(float(rng.gamma(29.39, 0.00885))) * rng.standard_normal(J))
        records.extend(LongRecord(f"u{i}", float(yy), tuple(map(float, xx)))
                       for yy, xx in zip(y, x))
    result = partial_out_covariates(records, ["x1", "x2"])
    dev = max(abs(result.beta["x1"] - 0.5), abs(result.beta["x2"] + 0.2))
    ok_beta = dev < 0.02

    # CLI determinism: byte-identical artifacts across two seeded runs.
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        "[dgp]\ne_mu = 0.0\nv_mu = 0.018\ne_sigma2 = 0.26\nv_sigma2 = 0.0023\n"
        "cor_mu_sigma2 = -0.38\n\n[experiment]\nn_list = [100]\nrounds = 3\n"
        "seed = 12\ntargets = [\"mu\", \"q0.1\"]\n"
        "[experiment.detection_grids]\nmu = { lo = -0.2, hi = 0.0, points = 3 }\n")
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli_main(["simulate", "--config", str(cfg), "--output-dir", out1]) == EXIT_OK
    assert cli_main(["simulate", "--config", str(cfg), "--output-dir", out2]) == EXIT_OK
    names = ("regrets.csv", "regrets.json", "diagnostics.json",
             "regret_vs_n_mu.png", "detection_regret_mu_n100.png")
    identical = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
                    for n in names)
    _report("criterion 11 (pipeline beta recovery + CLI determinism)",
            ok_beta and identical,
            f"beta max dev {dev:.4f}; byte-identical={identical}")
