"""Sieve maximum-likelihood fitting of the mixing distribution.

The sieve is a fixed tensor grid of (mu, sigma) support points clipped to the
data box, with at most ceil(sqrt(n)) atoms; only the weights are optimized,
by EM from a uniform start. Leave-one-out refits warm-start from the full-data
weights and run under an explicit iteration budget. All fits are
deterministic: there is no randomness anywhere in this module.

Log-likelihood bookkeeping uses per-iteration increments
sum_i log1p((t'_i - t_i) / t_i) so the recorded sequence inherits the EM
monotonicity guarantee up to a few ulps instead of cancellation noise.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import SufficientStats, stats_arrays
from .errors import EmptyData, NumericalFailure, UnknownUnit
from .mixture import DiscreteMixture, MixtureAtom, log_component_density_parts

logger = logging.getLogger("hetbayes.npmle")

SIGMA_LOWER_FLOOR = 1e-3
LOO_CHUNK_ROWS = 512


def default_order(n: int) -> int:
    """Sieve order: at most ceil(sqrt(n)) support points."""
    return max(2, math.ceil(math.sqrt(n)))


def default_eta(n: int) -> float:
    """NPMLE approximation tolerance scale, 1/n."""
    return 1.0 / n


@dataclass(frozen=True)
class SieveConfig:
    order_rule: Callable[[int], int] = default_order
    sigma_lower: Optional[float] = None  # None -> 0.5 * min(s_i), floored at 1e-3
    eta_rule: Callable[[int], float] = default_eta
    max_em_iters: int = 2000
    em_tol: float = 1e-8
    loo_max_iters: int = 50

    def __post_init__(self):
        if self.sigma_lower is not None and self.sigma_lower <= 0.0:
            raise ValueError("sigma_lower must be positive")
        if self.max_em_iters < 1 or self.loo_max_iters < 1:
            raise ValueError("iteration budgets must be at least 1")
        if self.em_tol <= 0.0:
            raise ValueError("em_tol must be positive")


@dataclass
class NpmleFit:
    mixture: DiscreteMixture
    final_loglik: float
    iters_used: int
    converged: bool
    min_loglik_step: float  # most negative per-iteration change observed (>= -1e-12 expected)

    def diagnostics(self):
        return {
            "final_loglik": self.final_loglik,
            "iters_used": self.iters_used,
            "converged": self.converged,
            "min_loglik_step": self.min_loglik_step,
        }


def resolve_sigma_lower(s_values, config: SieveConfig) -> float:
    """The configured lower sigma bound, or the data-driven default."""
    if config.sigma_lower is not None:
        return config.sigma_lower
    value = max(0.5 * float(np.min(s_values)), SIGMA_LOWER_FLOOR)
    logger.info("sigma_lower defaulted to %.6g (0.5 * min s, floored at %g)", value, SIGMA_LOWER_FLOOR)
    return value


def grid_axes(y_values, s_values, n: int, config: SieveConfig):
    """Equi-spaced (mu, sigma) axes for the tensor sieve grid.

    Total atom count g_mu * g_sigma never exceeds order_rule(n); the sigma
    axis collapses to the single point sigma_lower when the data sit below it.
    """
    order = int(config.order_rule(n))
    if order < 2:
        raise ValueError("sieve order must be at least 2")
    sigma_lower = resolve_sigma_lower(s_values, config)

    mu_lo, mu_hi = float(np.min(y_values)), float(np.max(y_values))
    sig_lo = max(sigma_lower, float(np.min(s_values)))
    sig_hi = float(np.max(s_values))

    if sig_hi <= sig_lo:
        # Data at or below the bound: the sigma axis is the single point sig_lo,
        # which equals sigma_lower whenever every s_i falls below it.
        sigma_points = np.array([sig_lo])
        g_mu = order
    else:
        g_sigma = max(1, math.isqrt(order))
        g_mu = max(1, order // g_sigma)
        sigma_points = np.linspace(sig_lo, sig_hi, g_sigma)

    if mu_hi <= mu_lo:
        mu_points = np.array([mu_lo])
    else:
        mu_points = np.linspace(mu_lo, mu_hi, g_mu)
    return mu_points, sigma_points


def build_sieve_grid(stats: Sequence[SufficientStats], config: SieveConfig = SieveConfig()) -> List[MixtureAtom]:
    """Zero-weight tensor grid of candidate atoms inside the data box."""
    if len(stats) == 0:
        raise EmptyData("cannot build a sieve grid from no units")
    y, s2, j, k = stats_arrays(stats)
    s = np.sqrt(s2)
    mu_points, sigma_points = grid_axes(y, s, len(stats), config)
    atoms = [
        MixtureAtom(weight=0.0, mu=float(m), sigma=float(sg), k=k, j_count=j)
        for sg in sigma_points
        for m in mu_points
    ]
    return atoms


def _scaled_density_matrix(logF):
    """Per-row max-shifted densities A with max_m A[i, m] = 1, plus the shifts."""
    c = np.max(logF, axis=1)
    if not np.all(np.isfinite(c)):
        raise NumericalFailure("a unit has zero density under every grid atom")
    A = np.exp(logF - c[:, None])
    return A, c


def em_weights(logF, w0, max_iters: int, tol: float):
    """EM on mixture weights for a fixed log-density matrix (n units x m atoms).

    Returns (weights, final_loglik, iters_used, converged, min_step).
    """
    n, m = logF.shape
    A, c = _scaled_density_matrix(logF)
    w = np.asarray(w0, dtype=float).copy()
    t = A @ w
    if np.any(t <= 0.0) or not np.all(np.isfinite(t)):
        raise NumericalFailure("zero or non-finite mixture density at EM start")
    loglik = math.fsum(np.log(t)) + math.fsum(c)
    min_step = 0.0
    iters = 0
    converged = False
    for it in range(1, max_iters + 1):
        w_new = w * ((A / t[:, None]).mean(axis=0))
        w_new /= w_new.sum()
        t_new = A @ w_new
        if np.any(t_new <= 0.0) or not np.all(np.isfinite(t_new)):
            raise NumericalFailure("zero or non-finite mixture density during EM")
        step = math.fsum(np.log1p((t_new - t) / t))
        loglik += step
        if math.isnan(loglik):
            raise NumericalFailure("log-likelihood became NaN during EM")
        min_step = min(min_step, step)
        w, t = w_new, t_new
        iters = it
        if abs(step) <= tol * max(1.0, abs(loglik)):
            converged = True
            break
    return w, loglik, iters, converged, min_step


@dataclass
class GridProblem:
    """A sieve grid plus the cached per-unit per-atom log densities."""

    y: np.ndarray
    s2: np.ndarray
    j_count: int
    k: float
    mus: np.ndarray
    sigmas: np.ndarray
    logF: np.ndarray  # (n, m): log f_m(y_i, s2_i), weights not included


def prepare_grid(stats: Sequence[SufficientStats], config: SieveConfig = SieveConfig()) -> GridProblem:
    """Build the sieve grid and evaluate every unit against every atom once."""
    if len(stats) < 2:
        raise EmptyData("need at least 2 units to fit")
    y, s2, j, k = stats_arrays(stats)
    atoms = build_sieve_grid(stats, config)
    mus = np.array([a.mu for a in atoms])
    sigmas = np.array([a.sigma for a in atoms])
    log_phi, log_gam = log_component_density_parts(mus, sigmas, k, j, y, s2)
    return GridProblem(y=y, s2=s2, j_count=j, k=k, mus=mus, sigmas=sigmas,
                       logF=log_phi + log_gam)


def fit_weights(problem: GridProblem, config: SieveConfig) -> NpmleFit:
    """EM from uniform weights on an already-prepared grid problem."""
    m = problem.mus.size
    w0 = np.full(m, 1.0 / m)
    w, loglik, iters, converged, min_step = em_weights(
        problem.logF, w0, config.max_em_iters, config.em_tol
    )
    mixture = DiscreteMixture(w, problem.mus, problem.sigmas, problem.j_count)
    return NpmleFit(mixture=mixture, final_loglik=loglik, iters_used=iters,
                    converged=converged, min_loglik_step=min_step)


def fit_npmle(stats: Sequence[SufficientStats], config: SieveConfig = SieveConfig()) -> NpmleFit:
    """Full-data sieve MLE from a uniform weight start."""
    return fit_weights(prepare_grid(stats, config), config)


def fit_loo_npmle(stats: Sequence[SufficientStats], full_fit: NpmleFit, exclude: str,
                  config: SieveConfig = SieveConfig()) -> NpmleFit:
    """Leave-one-out refit, warm-started at the full-data weights.

    Runs at most config.loo_max_iters EM iterations on the remaining units
    over the same grid as `full_fit`.
    """
    ids = [s.unit_id for s in stats]
    try:
        idx = ids.index(exclude)
    except ValueError:
        raise UnknownUnit(f"unit {exclude!r} not in dataset") from None
    rest = [s for i, s in enumerate(stats) if i != idx]
    y, s2, j, k = stats_arrays(rest)
    G = full_fit.mixture
    log_phi, log_gam = log_component_density_parts(G.mus, G.sigmas, k, j, y, s2)
    logF = log_phi + log_gam
    w, loglik, iters, converged, min_step = em_weights(
        logF, G.weights, config.loo_max_iters, config.em_tol
    )
    mixture = DiscreteMixture(w, G.mus, G.sigmas, j)
    return NpmleFit(mixture=mixture, final_loglik=loglik, iters_used=iters,
                    converged=converged, min_loglik_step=min_step)


@dataclass
class LooBatchResult:
    """All n leave-one-out weight vectors, stacked, with per-fit diagnostics."""

    weights: np.ndarray          # (n, m); row i is the fit excluding unit i
    logliks: np.ndarray          # (n,)
    iters_used: np.ndarray       # (n,)
    converged: np.ndarray        # (n,) bool
    min_loglik_step: float       # most negative step over all fits and sweeps


def loo_weights_batch(logF, w_full, config: SieveConfig) -> LooBatchResult:
    """All n leave-one-out EM refits at once, warm-started at `w_full`.

    Each row of the weight matrix evolves independently (its update only
    touches that row and the shared density matrix), so sweeping the whole
    matrix is exactly the parallel per-unit refit, expressed as matmuls.
    Converged rows are frozen and dropped from subsequent sweeps.
    """
    n, m = logF.shape
    if n < 2:
        raise EmptyData("need at least 2 units for leave-one-out fits")
    A, c = _scaled_density_matrix(logF)
    c_total = math.fsum(c)

    W = np.tile(np.asarray(w_full, dtype=float), (n, 1))
    t_full = A @ w_full
    if np.any(t_full <= 0.0):
        raise NumericalFailure("zero mixture density at warm start")
    log_t = np.log(t_full)
    base = math.fsum(log_t) + c_total
    logliks = base - (log_t + c)  # leave-one-out log-likelihoods at the warm start

    iters_used = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    min_step = 0.0
    active = np.arange(n)
    tol = config.em_tol

    for _ in range(config.loo_max_iters):
        if active.size == 0:
            break
        still_active = []
        for lo in range(0, active.size, LOO_CHUNK_ROWS):
            rows = active[lo:lo + LOO_CHUNK_ROWS]
            Wc = W[rows]
            T = Wc @ A.T                      # (r, n): density of unit i under fit row j
            if np.any(T <= 0.0):
                raise NumericalFailure("zero mixture density during LOO EM")
            B = 1.0 / T
            B[np.arange(rows.size), rows] = 0.0  # self-exclusion
            W_new = Wc * (B @ A) / (n - 1)
            W_new /= W_new.sum(axis=1, keepdims=True)
            T_new = W_new @ A.T
            if np.any(T_new <= 0.0) or not np.all(np.isfinite(T_new)):
                raise NumericalFailure("zero or non-finite density during LOO EM")
            D = np.log1p((T_new - T) / T)
            D[np.arange(rows.size), rows] = 0.0
            steps = D.sum(axis=1)
            logliks[rows] += steps
            if np.any(np.isnan(logliks[rows])):
                raise NumericalFailure("log-likelihood became NaN during LOO EM")
            min_step = min(min_step, float(steps.min()))
            W[rows] = W_new
            iters_used[rows] += 1
            done = np.abs(steps) <= tol * np.maximum(1.0, np.abs(logliks[rows]))
            converged[rows[done]] = True
            still_active.append(rows[~done])
        active = np.concatenate(still_active) if still_active else np.empty(0, dtype=int)

    return LooBatchResult(weights=W, logliks=logliks, iters_used=iters_used,
                          converged=converged, min_loglik_step=min_step)
