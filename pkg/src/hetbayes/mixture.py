"""Bivariate mixture density of the per-unit sufficient statistics.

Under a discrete mixing distribution with atoms (w_m, mu_m, sigma_m), the
sample mean is Gaussian with variance sigma_m^2/J and the sample variance is
Gamma with shape k = (J-1)/2 and scale theta_m = sigma_m^2/k, independently
given the atom. All evaluation is done in log space and exponentiated at the
end; mixtures are combined with log-sum-exp so that points far in a
component's tail cannot poison the sum.

The two tail integrals that drive the posterior-moment formulas collapse to
closed forms, because (s2/t)^(k-1) * gamma(t | k, theta) has the constant
integrand (s2)^(k-1) * exp(-t/theta) / (Gamma(k) * theta^k) in t:

    T0(theta, s2)    = theta * gamma(s2 | k, theta)
    Thalf(theta, s2) = sqrt(pi) * sqrt(theta / k) * gamma(s2 | k, theta)

so k * T0 / gamma = k * theta = sigma^2 and (k / sqrt(pi)) * Thalf / gamma
= sqrt(k * theta) = sigma.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import LengthMismatch
from .numerics import SQRT_PI, log_gamma_pdf, log_normal_pdf

WEIGHT_SUM_TOL = 1e-10


@dataclass(frozen=True)
class MixtureAtom:
    """One support point (weight, mu, sigma) of a discrete mixing distribution."""

    weight: float
    mu: float
    sigma: float
    k: float
    j_count: int

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("atom sigma must be positive")
        if self.weight < 0.0:
            raise ValueError("atom weight must be nonnegative")

    @property
    def theta(self):
        """Gamma scale of the sample variance under this atom."""
        return self.sigma * self.sigma / self.k

    @property
    def var_y(self):
        """Gaussian variance of the sample mean under this atom."""
        return self.sigma * self.sigma / self.j_count


class DiscreteMixture:
    """Immutable weighted atom set with the dataset's shared (k, J)."""

    def __init__(self, weights, mus, sigmas, j_count):
        weights = np.asarray(weights, dtype=float).copy()
        mus = np.asarray(mus, dtype=float).copy()
        sigmas = np.asarray(sigmas, dtype=float).copy()
        if not (weights.shape == mus.shape == sigmas.shape) or weights.ndim != 1:
            raise LengthMismatch("weights, mus, sigmas must be equal-length 1-d arrays")
        if weights.size == 0:
            raise LengthMismatch("mixture needs at least one atom")
        if j_count <= 3:
            raise ValueError("j_count must exceed 3")
        if np.any(sigmas <= 0.0):
            raise ValueError("atom sigmas must be positive")
        if np.any(weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL}, got {weights.sum()!r}")
        self.weights = weights
        self.mus = mus
        self.sigmas = sigmas
        self.j_count = int(j_count)
        self.k = (j_count - 1) / 2.0
        for a in (self.weights, self.mus, self.sigmas):
            a.setflags(write=False)

    @classmethod
    def from_atoms(cls, atoms: Sequence[MixtureAtom]):
        if not atoms:
            raise LengthMismatch("mixture needs at least one atom")
        j_counts = {a.j_count for a in atoms}
        if len(j_counts) != 1:
            raise LengthMismatch("atoms must share j_count")
        return cls(
            [a.weight for a in atoms],
            [a.mu for a in atoms],
            [a.sigma for a in atoms],
            j_counts.pop(),
        )

    @property
    def n_atoms(self):
        return self.weights.size

    @property
    def atoms(self):
        return [
            MixtureAtom(weight=float(w), mu=float(m), sigma=float(s), k=self.k, j_count=self.j_count)
            for w, m, s in zip(self.weights, self.mus, self.sigmas)
        ]

    def reweighted(self, weights):
        return DiscreteMixture(weights, self.mus, self.sigmas, self.j_count)

    def __repr__(self):
        return f"DiscreteMixture(n_atoms={self.n_atoms}, j_count={self.j_count})"


def log_component_density_parts(mus, sigmas, k, j_count, y, s2):
    """Log Gaussian part and log Gamma part, broadcasting points against atoms.

    `y`/`s2` of shape (n,) against atom arrays of shape (m,) give (n, m)
    matrices; scalars give (m,) vectors.
    """
    mus = np.asarray(mus, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    y = np.asarray(y, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
        s2 = s2[:, None]
    var_y = sigmas**2 / j_count
    theta = sigmas**2 / k
    log_phi = log_normal_pdf(y, mus, var_y)
    log_gam = log_gamma_pdf(s2, k, theta)
    return log_phi, log_gam


def component_density(atom: MixtureAtom, y, s2):
    """Joint sampling density of (y, s2) under a single atom; 0.0 on underflow."""
    log_phi, log_gam = log_component_density_parts(
        atom.mu, atom.sigma, atom.k, atom.j_count, y, s2
    )
    return float(np.exp(log_phi + log_gam))


def log_weighted_component_matrix(G: DiscreteMixture, y, s2):
    """Matrix of log(w_m * f_m(y_i, s2_i)); zero weights map to -inf rows."""
    log_phi, log_gam = log_component_density_parts(G.mus, G.sigmas, G.k, G.j_count, y, s2)
    with np.errstate(divide="ignore"):
        log_w = np.log(G.weights)
    return log_w + log_phi + log_gam


def log_mixture_density(G: DiscreteMixture, y, s2):
    """log f_G(y, s2); -inf when every weighted component underflows."""
    mat = log_weighted_component_matrix(G, y, s2)
    return logsumexp(mat, axis=-1)


def mixture_density(G: DiscreteMixture, y, s2):
    """f_G(y, s2) = sum_m w_m * f_m(y, s2)."""
    out = np.exp(log_mixture_density(G, y, s2))
    return float(out) if np.ndim(out) == 0 else out


def mixture_density_dy(G: DiscreteMixture, y, s2):
    """Analytic d f_G / dy.

    Per atom the y-dependence sits solely in the Gaussian factor, so the
    derivative multiplies each weighted component by -(y - mu_m) * J / sigma_m^2.
    Evaluated with a shared max-log shift to keep the signed sum stable.
    """
    mat = log_weighted_component_matrix(G, y, s2)
    y_arr = np.asarray(y, dtype=float)
    coef = -(np.expand_dims(y_arr, -1) - G.mus) * G.j_count / G.sigmas**2
    shift = np.max(mat, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    signed = np.sum(coef * np.exp(mat - shift), axis=-1) * np.exp(np.squeeze(shift, -1))
    return float(signed) if np.ndim(signed) == 0 else signed


def tail_integrals(atom: MixtureAtom, s2):
    """Closed forms of the two Gamma tail integrals at this atom.

    Returns (T0, Thalf) with
      T0    = integral_{s2}^inf (s2/t)^(k-1) gamma(t | k, theta) dt
      Thalf = integral_{s2}^inf (k (t-s2))^(-1/2) (s2/t)^(k-1) gamma(t | k, theta) dt.
    """
    if s2 <= 0.0:
        raise ValueError("s2 must be positive")
    theta = atom.theta
    log_gam = log_gamma_pdf(s2, atom.k, theta)
    gam = math.exp(float(log_gam))
    t0 = theta * gam
    thalf = SQRT_PI * math.sqrt(theta / atom.k) * gam
    return t0, thalf


def log_likelihood(G: DiscreteMixture, stats) -> float:
    """Sum of log f_G over units; -inf if any unit has zero density."""
    y = np.array([s.y_bar for s in stats], dtype=float)
    s2 = np.array([s.s2 for s in stats], dtype=float)
    logf = log_mixture_density(G, y, s2)
    if np.any(np.isneginf(logf)):
        return float("-inf")
    return float(np.sum(logf))
