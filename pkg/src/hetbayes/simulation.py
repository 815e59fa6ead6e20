"""Monte Carlo regret experiments over the copula DGP.

Each round draws unit parameters and observations, runs the requested
feasible estimators plus the oracle, and records per-target losses (squared
error, and detection losses over a threshold grid when configured). Rounds
own independent counter-based RNG streams keyed by (seed, n, round), so a
parallel run folds to exactly the same reports as a serial one.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .core import SufficientStats
from .dgp import DgpSpec, MomentTargets, calibrate_dgp, draw_parameter_arrays, _observation_matrix
from .core import UnitTruth
from .errors import DataError
from .estimators import (METHOD_HET, METHOD_HET_FULL, METHOD_HOM, METHOD_NAIVE, METHOD_ORACLE,
                         EstimatorConfig, BatchEstimates, het_batches, hom_batch, naive_batch)
from .npmle import SieveConfig
from .numerics import normal_quantile
from .oracle import OracleSpec, oracle_batch
from .risk import RegretReport, detection_loss, mse_loss, relative_regret

FEASIBLE_METHODS = (METHOD_HET, METHOD_HET_FULL, METHOD_HOM, METHOD_NAIVE)
DEFAULT_TARGETS = ("mu", "sigma", "sigma2", "q0.1")


def target_alpha(target: str) -> Optional[float]:
    """The quantile level of a target like "q0.1", or None for moment targets."""
    if target in ("mu", "sigma", "sigma2"):
        return None
    if target.startswith("q"):
        alpha = float(target[1:])
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"quantile target level out of range: {target!r}")
        return alpha
    raise ValueError(f"unknown target {target!r}")


@dataclass
class ExperimentSpec:
    """Declarative description of one regret experiment."""

    dgp: Union[DgpSpec, MomentTargets]
    n_list: Tuple[int, ...] = (200,)
    j_count: int = 15
    rounds: int = 100
    seed: int = 0
    estimators: Tuple[str, ...] = (METHOD_HET, METHOD_HOM, METHOD_NAIVE)
    targets: Tuple[str, ...] = DEFAULT_TARGETS
    detection_grids: Dict[str, Tuple[float, ...]] = field(default_factory=dict)
    sieve: SieveConfig = field(default_factory=SieveConfig)
    rho: Optional[float] = None          # estimator density floor; None -> 1/n
    oracle_nodes: Tuple[int, int] = (40, 40)
    threads: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.j_count <= 3:
            raise ValueError("j_count must exceed 3")
        unknown = set(self.estimators) - set(FEASIBLE_METHODS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        for t in self.targets:
            target_alpha(t)
        for t in self.detection_grids:
            if t not in self.targets:
                raise ValueError(f"detection grid target {t!r} not among targets")

    def resolved_dgp(self) -> DgpSpec:
        if isinstance(self.dgp, MomentTargets):
            return calibrate_dgp(self.dgp)
        return self.dgp

    def alphas(self) -> Tuple[float, ...]:
        alphas = sorted({a for a in map(target_alpha, self.targets) if a is not None})
        return tuple(alphas) if alphas else (0.1,)


@dataclass
class ExperimentResult:
    reports: List[RegretReport]
    diagnostics: Dict[str, object]


def _truth_values(target: str, mu, sigma):
    alpha = target_alpha(target)
    if target == "mu":
        return mu
    if target == "sigma":
        return sigma
    if target == "sigma2":
        return sigma**2
    return mu + sigma * normal_quantile(alpha)


def _estimate_values(target: str, batch: BatchEstimates):
    alpha = target_alpha(target)
    if target == "mu":
        return batch.mu_hat
    if target == "sigma":
        return batch.sigma_hat
    if target == "sigma2":
        return batch.sigma2_hat
    return batch.q_hat[alpha]


def _round_seeds(seed: int, n: int, round_idx: int):
    params = np.random.SeedSequence(entropy=(seed, n, round_idx, 0))
    obs = np.random.SeedSequence(entropy=(seed, n, round_idx, 1))
    return params, obs


def run_round(dgp: DgpSpec, n: int, round_idx: int, spec: ExperimentSpec):
    """One simulation round; returns (losses, detection_losses, diagnostics).

    `losses` maps (target, method) to the round's loss; detection losses map
    (target, threshold, method).
    """
    seed_params, seed_obs = _round_seeds(spec.seed, n, round_idx)
    mu, sigma = draw_parameter_arrays(dgp, n, seed_params)
    truths = [UnitTruth(mu=float(m), sigma=float(s), unit_id=f"u{i}")
              for i, (m, s) in enumerate(zip(mu, sigma))]
    Y = _observation_matrix(truths, spec.j_count, seed_obs)
    y_bar = Y.mean(axis=1)
    s2 = np.sum((Y - y_bar[:, None]) ** 2, axis=1) / (spec.j_count - 1)
    stats = [SufficientStats(unit_id=t.unit_id, y_bar=float(yb), s2=float(v), j_count=spec.j_count)
             for t, yb, v in zip(truths, y_bar, s2)]

    alphas = spec.alphas()
    est_config = EstimatorConfig(rho=spec.rho, alpha_list=alphas)

    batches: Dict[str, BatchEstimates] = {}
    het_variants = [m for m in spec.estimators if m in (METHOD_HET, METHOD_HET_FULL)]
    if het_variants:
        batches.update(het_batches(stats, spec.sieve, est_config, variants=het_variants))
    if METHOD_HOM in spec.estimators:
        batches[METHOD_HOM] = hom_batch(stats, spec.sieve, est_config)
    if METHOD_NAIVE in spec.estimators:
        batches[METHOD_NAIVE] = naive_batch(stats, alphas)
    oracle_spec = OracleSpec(prior=dgp, nodes=spec.oracle_nodes, j_count=spec.j_count)
    batches[METHOD_ORACLE] = oracle_batch(stats, oracle_spec, alphas)

    losses: Dict[Tuple[str, str], float] = {}
    det_losses: Dict[Tuple[str, float, str], float] = {}
    for target in spec.targets:
        truth_vals = _truth_values(target, mu, sigma)
        for method, batch in batches.items():
            est_vals = _estimate_values(target, batch)
            losses[(target, method)] = mse_loss(est_vals, truth_vals)
            for c in spec.detection_grids.get(target, ()):
                det_losses[(target, float(c), method)] = detection_loss(est_vals, truth_vals, c)

    min_step = min((b.diagnostics.get("min_loglik_step", 0.0) for b in batches.values()),
                   default=0.0)
    diag = {"min_loglik_step": float(min_step)}
    return losses, det_losses, diag


def _round_worker(args):
    dgp, n, round_idx, spec = args
    return run_round(dgp, n, round_idx, spec)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run all (n, round) cells and fold the per-round losses into reports."""
    dgp = spec.resolved_dgp()
    reports: List[RegretReport] = []
    global_min_step = 0.0
    per_cell_rounds: Dict[int, list] = {}

    for n in spec.n_list:
        tasks = [(dgp, n, r, spec) for r in range(spec.rounds)]
        if spec.threads > 1:
            with ProcessPoolExecutor(max_workers=spec.threads) as pool:
                results = list(pool.map(_round_worker, tasks, chunksize=1))
        else:
            results = [run_round(*t[:3], t[3]) for t in tasks]
        per_cell_rounds[n] = results
        for _, _, diag in results:
            global_min_step = min(global_min_step, diag["min_loglik_step"])

        methods = [m for m in spec.estimators]
        for target in spec.targets:
            oracle_losses = [res[0][(target, METHOD_ORACLE)] for res in results]
            method_mean = {}
            rel = {}
            for m in methods + [METHOD_ORACLE]:
                m_losses = [res[0][(target, m)] for res in results]
                method_mean[m] = math.fsum(m_losses) / len(m_losses)
                rel[m] = relative_regret(m_losses, oracle_losses)
            reports.append(RegretReport(
                target=target, loss="mse", n=n, j_count=spec.j_count,
                rounds=spec.rounds, seed=spec.seed, dgp=dgp.describe(),
                method_mean_loss=method_mean,
                oracle_mean_loss=method_mean[METHOD_ORACLE],
                relative_regret=rel,
            ))
            for c in spec.detection_grids.get(target, ()):
                oracle_losses = [res[1][(target, float(c), METHOD_ORACLE)] for res in results]
                method_mean = {}
                rel = {}
                for m in methods + [METHOD_ORACLE]:
                    m_losses = [res[1][(target, float(c), m)] for res in results]
                    method_mean[m] = math.fsum(m_losses) / len(m_losses)
                    rel[m] = relative_regret(m_losses, oracle_losses)
                reports.append(RegretReport(
                    target=target, loss="detect", n=n, j_count=spec.j_count,
                    rounds=spec.rounds, seed=spec.seed, dgp=dgp.describe(),
                    method_mean_loss=method_mean,
                    oracle_mean_loss=method_mean[METHOD_ORACLE],
                    relative_regret=rel, threshold=float(c),
                ))

    diagnostics = {
        "min_loglik_step": global_min_step,
        "dgp": dgp.describe(),
    }
    return ExperimentResult(reports=reports, diagnostics=diagnostics)


def perturbed_targets(base: MomentTargets, **overrides) -> MomentTargets:
    """A copy of the moment targets with one (or more) dimension changed."""
    values = {
        "e_mu": base.e_mu, "v_mu": base.v_mu, "e_sigma2": base.e_sigma2,
        "v_sigma2": base.v_sigma2, "cor_mu_sigma2": base.cor_mu_sigma2,
    }
    unknown = set(overrides) - set(values)
    if unknown:
        raise DataError(f"unknown moment fields: {sorted(unknown)}")
    values.update(overrides)
    return MomentTargets(**values)
