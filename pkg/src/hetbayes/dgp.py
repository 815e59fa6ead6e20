"""Gaussian-copula / Gamma data generating process and its moment calibration.

Unit parameters are generated by pushing a correlated bivariate standard
normal through a linear map (for the means) and a Gamma quantile transform
(for the variances):

    mu      = alpha + sqrt(nu) * xi1
    sigma^2 = GammaQuantile(Phi(xi2); kappa, lam)
    corr(xi1, xi2) = rho_copula

Calibration to five moment targets is closed-form except for the copula
correlation: cov(mu, sigma^2) = sqrt(nu) * rho * E[xi * GammaQuantile(Phi(xi))]
is linear in rho because E[xi1 | xi2] = rho * xi2, and the remaining
expectation is a smooth one-dimensional Gaussian integral.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .core import Dataset, SufficientStats, UnitObservations, UnitTruth
from .errors import InfeasibleCorrelation
from .numerics import gamma_quantile, gauss_hermite_probabilists, normal_cdf

CALIBRATION_NODES = 256
# Tail probabilities are clipped at the float resolution of the normal CDF;
# quadrature nodes out there carry weights around exp(-480) and contribute
# nothing to any integral in double precision.
_P_CLIP_LO = 1e-16
_P_CLIP_HI = 1.0 - 1e-16


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the copula DGP."""

    alpha: float
    nu: float
    kappa: float
    lam: float
    rho_copula: float

    def __post_init__(self):
        if self.nu <= 0.0 or self.kappa <= 0.0 or self.lam <= 0.0:
            raise ValueError("nu, kappa, lam must be positive")
        if not -1.0 < self.rho_copula < 1.0:
            raise ValueError("rho_copula must lie strictly inside (-1, 1)")

    def describe(self):
        return {"alpha": self.alpha, "nu": self.nu, "kappa": self.kappa,
                "lam": self.lam, "rho_copula": self.rho_copula}


@dataclass(frozen=True)
class MomentTargets:
    """First five moments of (mu, sigma^2) to calibrate against."""

    e_mu: float
    v_mu: float
    e_sigma2: float
    v_sigma2: float
    cor_mu_sigma2: float

    def __post_init__(self):
        if self.v_mu <= 0.0 or self.v_sigma2 <= 0.0 or self.e_sigma2 <= 0.0:
            raise ValueError("v_mu, v_sigma2, e_sigma2 must be positive")
        if not -1.0 < self.cor_mu_sigma2 < 1.0:
            raise ValueError("cor_mu_sigma2 must lie strictly inside (-1, 1)")


def xi_quantile_cov(kappa: float, lam: float, n_nodes: int = CALIBRATION_NODES) -> float:
    """E[xi * GammaQuantile(Phi(xi); kappa, lam)] for standard normal xi."""
    x, w = gauss_hermite_probabilists(n_nodes)
    p = np.clip(normal_cdf(x), _P_CLIP_LO, _P_CLIP_HI)
    return float(np.sum(w * x * gamma_quantile(p, kappa, lam)))


def calibrate_dgp(targets: MomentTargets) -> DgpSpec:
    """Solve the DGP parameters reproducing the five moment targets.

    The Gamma marginal is pinned by kappa * lam = E[sigma^2] and
    kappa * lam^2 = V[sigma^2]; the copula correlation then follows from the
    linear covariance identity. Raises InfeasibleCorrelation when the target
    correlation exceeds what the copula can produce for this marginal.
    """
    lam = targets.v_sigma2 / targets.e_sigma2
    kappa = targets.e_sigma2 / lam
    c = xi_quantile_cov(kappa, lam)
    attainable = c / math.sqrt(targets.v_sigma2)
    rho = targets.cor_mu_sigma2 * math.sqrt(targets.v_sigma2) / c
    if not -1.0 < rho < 1.0:
        raise InfeasibleCorrelation(
            f"target correlation {targets.cor_mu_sigma2} needs |rho| = {abs(rho):.4f} >= 1; "
            f"attainable |correlation| is below {attainable:.4f}"
        )
    return DgpSpec(alpha=targets.e_mu, nu=targets.v_mu, kappa=kappa, lam=lam, rho_copula=rho)


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def draw_parameter_arrays(spec: DgpSpec, n: int, seed):
    """(mu, sigma) arrays drawn from the copula DGP, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    z = rng.standard_normal((n, 2))
    zeta, xi2 = z[:, 0], z[:, 1]
    xi1 = spec.rho_copula * xi2 + math.sqrt(1.0 - spec.rho_copula**2) * zeta
    mu = spec.alpha + math.sqrt(spec.nu) * xi1
    p = np.clip(normal_cdf(xi2), _P_CLIP_LO, _P_CLIP_HI)
    sigma2 = gamma_quantile(p, spec.kappa, spec.lam)
    return mu, np.sqrt(sigma2)


def draw_parameters(spec: DgpSpec, n: int, seed) -> List[UnitTruth]:
    mu, sigma = draw_parameter_arrays(spec, n, seed)
    return [UnitTruth(mu=float(m), sigma=float(s), unit_id=f"u{i}")
            for i, (m, s) in enumerate(zip(mu, sigma))]


def _observation_matrix(truths: Sequence[UnitTruth], j_count: int, seed):
    if j_count <= 3:
        raise ValueError("j_count must exceed 3")
    mu = np.array([t.mu for t in truths])
    sigma = np.array([t.sigma for t in truths])
    rng = _rng(seed)
    eps = rng.standard_normal((len(truths), j_count))
    return mu[:, None] + sigma[:, None] * eps


def draw_observations(truths: Sequence[UnitTruth], j_count: int, seed) -> Dataset:
    """Raw per-unit observation draws under the Gaussian sampling model."""
    Y = _observation_matrix(truths, j_count, seed)
    units = [UnitObservations(t.unit_id or f"u{i}", row) for i, (t, row) in enumerate(zip(truths, Y))]
    return Dataset(units=units, truths=list(truths))


def draw_sufficient_stats(truths: Sequence[UnitTruth], j_count: int, seed) -> List[SufficientStats]:
    """Same draws as draw_observations, reduced vectorized to sufficient stats."""
    Y = _observation_matrix(truths, j_count, seed)
    y_bar = Y.mean(axis=1)
    s2 = np.sum((Y - y_bar[:, None]) ** 2, axis=1) / (j_count - 1)
    return [SufficientStats(unit_id=t.unit_id or f"u{i}", y_bar=float(yb), s2=float(v), j_count=j_count)
            for i, (t, yb, v) in enumerate(zip(truths, y_bar, s2))]
