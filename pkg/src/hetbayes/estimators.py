"""Posterior-moment estimators of unit means, scales, variances, and quantiles.

Given a discrete mixing distribution the four estimators reduce to per-atom
closed forms: the tail integrals of the Gamma factor collapse (see
hetbayes.mixture), leaving

    sigma2_hat = k  * sum_m w_m phi_m(y) T0(theta_m, s2)    / (f ∨ rho)
    sigma_hat  = (k / Gamma(1/2)) * sum_m w_m phi_m(y) Thalf(theta_m, s2) / (f ∨ rho)
    mu_hat     = y + sum_m w_m (mu_m - y) phi_m(y) gamma_m(s2) / (f ∨ rho)
    q_hat      = mu_hat + sigma_hat * z_alpha

where f is the mixture density at (y, s2) and rho is a stabilizing floor on
the denominator. Whenever rho <= f these are exactly the posterior means of
sigma^2, sigma, and mu under atom weights p_m proportional to
w_m phi_m gamma_m; when the floor binds, every Bayes-correction term scales
down by f/rho, deliberately shrinking the estimate.

The scale estimator keeps the 1/Gamma(1/2) factor of the underlying
posterior-moment identity: without it a point-mass prior would not return its
own sigma.

Three estimator families are provided over a whole dataset: the
heteroskedastic sieve-MLE estimator with leave-one-out refits (optionally
disabled to get the full-fit variant), a homoskedastic counterpart that pools
the sample variances and fits a mean-only mixture, and the naive plug-in.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .core import SufficientStats, stats_arrays
from .errors import NumericalFailure, TruncationDominates
from .mixture import DiscreteMixture, log_component_density_parts, log_weighted_component_matrix
from .npmle import SieveConfig, em_weights, grid_axes, loo_weights_batch, prepare_grid, fit_weights
from .numerics import SQRT_PI, log_normal_pdf, normal_quantile

METHOD_HET = "HET"
METHOD_HET_FULL = "HET_FULL"
METHOD_HOM = "HOM"
METHOD_NAIVE = "NAIVE"
METHOD_ORACLE = "ORACLE"


@dataclass(frozen=True)
class EstimatorConfig:
    rho: Optional[float] = None           # None -> 1/n at the call site
    alpha_list: Tuple[float, ...] = (0.1,)

    def __post_init__(self):
        if self.rho is not None and self.rho < 0.0:
            raise ValueError("rho must be nonnegative")
        for a in self.alpha_list:
            if not 0.0 < a < 1.0:
                raise ValueError("quantile levels must lie strictly inside (0, 1)")

    def resolve_rho(self, n: int) -> float:
        return self.rho if self.rho is not None else 1.0 / n


@dataclass(frozen=True)
class UnitEstimates:
    """One unit's estimate quadruple under one method."""

    unit_id: str
    method: str
    mu_hat: float
    sigma_hat: float
    sigma2_hat: float
    q_hat: Dict[float, float]


def _check_point(s2, rho):
    if s2 <= 0.0:
        raise ValueError("s2 must be positive")
    if rho < 0.0:
        raise ValueError("rho must be nonnegative")


def _log_denominator(G: DiscreteMixture, y: float, s2: float, rho: float) -> float:
    """log(f_G(y, s2) ∨ rho), warning if the floor binds."""
    logf = float(logsumexp(log_weighted_component_matrix(G, y, s2)))
    if rho == 0.0:
        if logf == float("-inf"):
            raise NumericalFailure("mixture density is zero and rho = 0")
        return logf
    log_rho = math.log(rho)
    if logf < log_rho:
        warnings.warn(
            f"density {math.exp(logf):.3e} below floor rho={rho:.3e}; estimate shrunk",
            TruncationDominates,
            stacklevel=3,
        )
        return log_rho
    return logf


def estimate_sigma2(y: float, s2: float, G: DiscreteMixture, rho: float = 0.0) -> float:
    """Posterior-mean-style estimate of the unit variance."""
    _check_point(s2, rho)
    log_den = _log_denominator(G, y, s2, rho)
    log_phi, log_gam = log_component_density_parts(G.mus, G.sigmas, G.k, G.j_count, y, s2)
    theta = G.sigmas**2 / G.k
    with np.errstate(divide="ignore"):
        terms = np.log(G.weights) + log_phi + np.log(theta) + log_gam
    log_num = math.log(G.k) + float(logsumexp(terms))
    return math.exp(log_num - log_den)


def estimate_sigma(y: float, s2: float, G: DiscreteMixture, rho: float = 0.0) -> float:
    """Posterior-mean-style estimate of the unit standard deviation."""
    _check_point(s2, rho)
    log_den = _log_denominator(G, y, s2, rho)
    log_phi, log_gam = log_component_density_parts(G.mus, G.sigmas, G.k, G.j_count, y, s2)
    theta = G.sigmas**2 / G.k
    with np.errstate(divide="ignore"):
        log_thalf = math.log(SQRT_PI) + 0.5 * np.log(theta / G.k) + log_gam
        terms = np.log(G.weights) + log_phi + log_thalf
    log_num = math.log(G.k) - math.log(SQRT_PI) + float(logsumexp(terms))
    return math.exp(log_num - log_den)


def estimate_mu(y: float, s2: float, G: DiscreteMixture, rho: float = 0.0) -> float:
    """Tweedie-form estimate of the unit mean.

    The y-derivative of the tail-integral term hits only the Gaussian factor,
    and k * theta_m / sigma_m^2 = 1 collapses the coefficient, leaving the
    signed correction sum_m w_m (mu_m - y) phi_m gamma_m.
    """
    _check_point(s2, rho)
    log_den = _log_denominator(G, y, s2, rho)
    mat = log_weighted_component_matrix(G, y, s2)
    shift = float(np.max(mat))
    if shift == float("-inf"):
        return float(y)
    signed = float(np.sum((G.mus - y) * np.exp(mat - shift)))
    return float(y) + signed * math.exp(shift - log_den)


def estimate_quantile(y: float, s2: float, alpha: float, G: DiscreteMixture, rho: float = 0.0) -> float:
    """Quantile estimate: the exact linear combination mu_hat + sigma_hat * z_alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    return estimate_mu(y, s2, G, rho) + estimate_sigma(y, s2, G, rho) * normal_quantile(alpha)


def _batch_posterior_estimates(y, s2, k, j_count, mus, sigmas, log_weights, rho, alphas,
                               gamma_included=True):
    """Vectorized estimator quadruple for n points.

    `log_weights` is (m,) for a shared mixture or (n, m) for per-unit
    mixtures (the leave-one-out path). With `gamma_included=False` the Gamma
    factor is dropped: that is the homoskedastic mean-only likelihood, where
    the posterior runs over mu atoms alone.
    """
    y = np.asarray(y, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    log_phi, log_gam = log_component_density_parts(mus, sigmas, k, j_count, y, s2)
    L = log_weights + log_phi + (log_gam if gamma_included else 0.0)
    logf = logsumexp(L, axis=-1)

    dead = ~np.isfinite(logf)
    if rho == 0.0:
        if np.any(dead):
            raise NumericalFailure("mixture density is zero at a data point and rho = 0")
        factor = np.ones_like(logf)
    else:
        n_below = int(np.count_nonzero(logf < math.log(rho)))
        if n_below:
            warnings.warn(
                f"density below floor rho={rho:.3e} at {n_below} point(s); estimates shrunk",
                TruncationDominates,
                stacklevel=3,
            )
        factor = np.exp(np.minimum(0.0, logf - math.log(rho)))
        factor = np.where(dead, 0.0, factor)

    safe_logf = np.where(dead, 0.0, logf)
    P = np.exp(L - safe_logf[..., None])
    if np.any(dead):
        P[dead] = 0.0

    post_mu = P @ mus
    post_sigma = P @ sigmas
    post_sigma2 = P @ (sigmas**2)

    mu_hat = y + factor * (post_mu - y)
    sigma_hat = factor * post_sigma
    sigma2_hat = factor * post_sigma2
    q_hat = {a: mu_hat + sigma_hat * normal_quantile(a) for a in alphas}
    return mu_hat, sigma_hat, sigma2_hat, q_hat


@dataclass
class BatchEstimates:
    """Array-level estimator output for one method over a dataset."""

    method: str
    unit_ids: List[str]
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    sigma2_hat: np.ndarray
    q_hat: Dict[float, np.ndarray]
    diagnostics: Dict[str, object]

    def to_unit_estimates(self) -> List[UnitEstimates]:
        out = []
        for i, uid in enumerate(self.unit_ids):
            out.append(UnitEstimates(
                unit_id=uid,
                method=self.method,
                mu_hat=float(self.mu_hat[i]),
                sigma_hat=float(self.sigma_hat[i]),
                sigma2_hat=float(self.sigma2_hat[i]),
                q_hat={a: float(v[i]) for a, v in self.q_hat.items()},
            ))
        return out


def het_batches(stats: Sequence[SufficientStats],
                sieve_config: SieveConfig = SieveConfig(),
                est_config: EstimatorConfig = EstimatorConfig(),
                variants: Sequence[str] = (METHOD_HET,)) -> Dict[str, BatchEstimates]:
    """Heteroskedastic estimates for every unit, one entry per requested variant.

    The sieve MLE is fitted once and shared. METHOD_HET evaluates each unit
    under its own leave-one-out refit (warm-started at the full-data
    weights); METHOD_HET_FULL evaluates every unit under the full-data fit.
    """
    unknown = set(variants) - {METHOD_HET, METHOD_HET_FULL}
    if unknown:
        raise ValueError(f"unknown heteroskedastic variants: {sorted(unknown)}")
    problem = prepare_grid(stats, sieve_config)
    n = problem.y.size
    rho = est_config.resolve_rho(n)
    full_fit = fit_weights(problem, sieve_config)
    unit_ids = [s.unit_id for s in stats]

    out: Dict[str, BatchEstimates] = {}
    for variant in variants:
        diagnostics = {
            "full_fit": full_fit.diagnostics(),
            "min_loglik_step": full_fit.min_loglik_step,
            "rho": rho,
        }
        if variant == METHOD_HET:
            batch = loo_weights_batch(problem.logF, full_fit.mixture.weights, sieve_config)
            with np.errstate(divide="ignore"):
                log_w = np.log(batch.weights)
            diagnostics["loo"] = {
                "iters_used_max": int(batch.iters_used.max()),
                "converged_frac": float(batch.converged.mean()),
                "min_loglik_step": batch.min_loglik_step,
            }
            diagnostics["min_loglik_step"] = min(full_fit.min_loglik_step, batch.min_loglik_step)
        else:
            with np.errstate(divide="ignore"):
                log_w = np.log(full_fit.mixture.weights)

        mu_hat, sigma_hat, sigma2_hat, q_hat = _batch_posterior_estimates(
            problem.y, problem.s2, problem.k, problem.j_count,
            problem.mus, problem.sigmas, log_w, rho, est_config.alpha_list,
        )
        out[variant] = BatchEstimates(method=variant, unit_ids=unit_ids,
                                      mu_hat=mu_hat, sigma_hat=sigma_hat,
                                      sigma2_hat=sigma2_hat, q_hat=q_hat,
                                      diagnostics=diagnostics)
    return out


def het_batch(stats: Sequence[SufficientStats],
              sieve_config: SieveConfig = SieveConfig(),
              est_config: EstimatorConfig = EstimatorConfig(),
              loo: bool = True) -> BatchEstimates:
    variant = METHOD_HET if loo else METHOD_HET_FULL
    return het_batches(stats, sieve_config, est_config, variants=(variant,))[variant]


def hom_batch(stats: Sequence[SufficientStats],
              sieve_config: SieveConfig = SieveConfig(),
              est_config: EstimatorConfig = EstimatorConfig(),
              loo: bool = True) -> BatchEstimates:
    """Homoskedastic counterpart: pooled variance, mean-only mixture fit.

    The common variance is the plain average of the sample variances. The
    mean mixture lives on the same mu axis as the bivariate sieve grid, and
    the likelihood is over the sample means alone (the sample variances carry
    no information about mu once sigma is common). Leave-one-out refits
    mirror the heteroskedastic path.
    """
    y, s2, j, k = stats_arrays(stats)
    n = y.size
    rho = est_config.resolve_rho(n)
    sigma2_common = float(np.mean(s2))
    sigma_common = math.sqrt(sigma2_common)

    mu_points, _ = grid_axes(y, np.sqrt(s2), n, sieve_config)
    logF = log_normal_pdf(y[:, None], mu_points, sigma2_common / j)
    m = mu_points.size
    w0 = np.full(m, 1.0 / m)
    w, loglik, iters, converged, min_step = em_weights(
        logF, w0, sieve_config.max_em_iters, sieve_config.em_tol
    )
    diagnostics = {
        "full_fit": {"final_loglik": loglik, "iters_used": iters, "converged": converged,
                     "min_loglik_step": min_step},
        "min_loglik_step": min_step,
        "sigma2_common": sigma2_common,
        "rho": rho,
    }
    if loo and n >= 2:
        batch = loo_weights_batch(logF, w, sieve_config)
        with np.errstate(divide="ignore"):
            log_w = np.log(batch.weights)
        diagnostics["loo"] = {
            "iters_used_max": int(batch.iters_used.max()),
            "converged_frac": float(batch.converged.mean()),
            "min_loglik_step": batch.min_loglik_step,
        }
        diagnostics["min_loglik_step"] = min(min_step, batch.min_loglik_step)
    else:
        with np.errstate(divide="ignore"):
            log_w = np.log(w)

    sigmas_dummy = np.full(m, sigma_common)
    mu_hat, _, _, _ = _batch_posterior_estimates(
        y, s2, k, j, mu_points, sigmas_dummy, log_w, rho, (),
        gamma_included=False,
    )
    sigma_hat = np.full(n, sigma_common)
    sigma2_hat = np.full(n, sigma2_common)
    q_hat = {a: mu_hat + sigma_hat * normal_quantile(a) for a in est_config.alpha_list}
    return BatchEstimates(method=METHOD_HOM, unit_ids=[s.unit_id for s in stats],
                          mu_hat=mu_hat, sigma_hat=sigma_hat, sigma2_hat=sigma2_hat,
                          q_hat=q_hat, diagnostics=diagnostics)


def naive_batch(stats: Sequence[SufficientStats], alpha_list=(0.1,)) -> BatchEstimates:
    """Plug-in estimates: the sufficient statistics themselves (any mix of J)."""
    y = np.array([st.y_bar for st in stats])
    s2 = np.array([st.s2 for st in stats])
    s = np.sqrt(s2)
    q_hat = {a: y + normal_quantile(a) * s for a in alpha_list}
    return BatchEstimates(method=METHOD_NAIVE, unit_ids=[st.unit_id for st in stats],
                          mu_hat=y.copy(), sigma_hat=s, sigma2_hat=s2.copy(),
                          q_hat=q_hat, diagnostics={})


def estimate_all_units_het(stats, sieve_config=SieveConfig(), est_config=EstimatorConfig(),
                           loo: bool = True) -> List[UnitEstimates]:
    return het_batch(stats, sieve_config, est_config, loo=loo).to_unit_estimates()


def estimate_all_units_hom(stats, sieve_config=SieveConfig(), est_config=EstimatorConfig(),
                           loo: bool = True) -> List[UnitEstimates]:
    return hom_batch(stats, sieve_config, est_config, loo=loo).to_unit_estimates()


def estimate_all_units_naive(stats, alpha_list=(0.1,)) -> List[UnitEstimates]:
    return naive_batch(stats, alpha_list).to_unit_estimates()
