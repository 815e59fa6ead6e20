"""Domain types for grouped observations and their sufficient-statistic reduction.

Each unit contributes J repeated measurements. Under the Gaussian sampling
model everything the data say about a unit's (mean, variance) pair is carried
by the sample mean and the unbiased sample variance, so the rest of the
package works on those two numbers plus the per-unit count.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateVariance, EmptyData, LengthMismatch, TooFewObservations
from .numerics import normal_quantile

MIN_J_FOR_ESTIMATION = 4  # the posterior-moment identities need J > 3


@dataclass(frozen=True)
class UnitObservations:
    """Raw repeated measurements for one unit."""

    unit_id: str
    values: tuple

    def __init__(self, unit_id, values):
        vals = tuple(float(v) for v in values)
        if len(vals) < 2:
            raise TooFewObservations(f"unit {unit_id!r}: need at least 2 observations, got {len(vals)}")
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"unit {unit_id!r}: observations must be finite")
        object.__setattr__(self, "unit_id", str(unit_id))
        object.__setattr__(self, "values", vals)

    @property
    def j_count(self):
        return len(self.values)


@dataclass(frozen=True)
class SufficientStats:
    """Per-unit sample mean, unbiased sample variance, and count.

    `k` is half the degrees of freedom of the variance estimate; it is the
    Gamma shape parameter of the sampling distribution of `s2`.
    """

    unit_id: str
    y_bar: float
    s2: float
    j_count: int

    def __post_init__(self):
        if self.j_count <= 3:
            raise TooFewObservations(f"unit {self.unit_id!r}: j_count must exceed 3, got {self.j_count}")
        if not (np.isfinite(self.y_bar) and np.isfinite(self.s2)):
            raise ValueError(f"unit {self.unit_id!r}: non-finite sufficient statistics")
        if self.s2 <= 0.0:
            raise DegenerateVariance(f"unit {self.unit_id!r}: sample variance must be positive")

    @property
    def k(self):
        return (self.j_count - 1) / 2.0


@dataclass(frozen=True)
class UnitTruth:
    """Latent parameters of one unit (simulation mode only)."""

    mu: float
    sigma: float
    unit_id: Optional[str] = None

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")

    @property
    def sigma2(self):
        return self.sigma * self.sigma

    def q(self, alpha):
        """The alpha-quantile of this unit's outcome distribution."""
        return self.mu + self.sigma * normal_quantile(alpha)


@dataclass
class Dataset:
    """A batch of units, optionally paired with their latent truths."""

    units: list
    truths: Optional[list] = None

    def __post_init__(self):
        ids = [u.unit_id for u in self.units]
        if len(set(ids)) != len(ids):
            raise LengthMismatch("unit ids must be unique")
        if self.truths is not None and len(self.truths) != len(self.units):
            raise LengthMismatch("truths must align one-to-one with units")

    def sufficient_stats(self):
        """Reduce any raw-observation units; stats units pass through."""
        out = []
        for u in self.units:
            if isinstance(u, SufficientStats):
                out.append(u)
            else:
                out.append(compute_sufficient_stats(u))
        return out


def compute_sufficient_stats(obs: UnitObservations) -> SufficientStats:
    """Reduce one unit's observations to (mean, unbiased variance, count).

    Raises TooFewObservations for J <= 3 and DegenerateVariance when all
    values coincide; the downstream Gamma density is undefined at s2 = 0.
    """
    values = np.asarray(obs.values, dtype=float)
    j = values.size
    if j < MIN_J_FOR_ESTIMATION:
        raise TooFewObservations(f"unit {obs.unit_id!r}: need at least {MIN_J_FOR_ESTIMATION} observations, got {j}")
    y_bar = float(np.mean(values))
    s2 = float(np.sum((values - y_bar) ** 2) / (j - 1))
    if s2 == 0.0:
        raise DegenerateVariance(f"unit {obs.unit_id!r}: all observations identical")
    return SufficientStats(unit_id=obs.unit_id, y_bar=y_bar, s2=s2, j_count=j)


def stats_arrays(stats: Sequence[SufficientStats]):
    """Validate a homogeneous-J batch and unpack it into arrays.

    Returns (y_bar, s2, j_count, k). Raises EmptyData on an empty batch and
    LengthMismatch if the units do not share a common J.
    """
    if len(stats) == 0:
        raise EmptyData("no units supplied")
    j_counts = {s.j_count for s in stats}
    if len(j_counts) != 1:
        raise LengthMismatch(f"units must share a common per-unit count, saw {sorted(j_counts)}")
    j = j_counts.pop()
    y = np.array([s.y_bar for s in stats], dtype=float)
    s2 = np.array([s.s2 for s in stats], dtype=float)
    return y, s2, j, (j - 1) / 2.0
