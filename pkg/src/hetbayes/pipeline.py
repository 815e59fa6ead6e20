"""End-to-end data pipeline: ingestion, residualization, binned estimation.

Input is one canonical long CSV with header ``unit_id,outcome[,covariates...]``
(plus optional grouping columns for standardization). Covariate effects are
removed by within-unit demeaned OLS, after which the per-unit estimation of
the other modules applies. Units with differing per-unit counts are grouped
into bins (exact J, or configured J bands) and estimated separately per bin;
within a band each unit keeps its own Gamma shape in the likelihood.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .core import SufficientStats, UnitObservations
from .errors import (BinTooSmall, DataError, EmptyData, InsufficientWithinVariation,
                     LengthMismatch, RankDeficient)
from .estimators import (METHOD_HET, METHOD_HET_FULL, METHOD_HOM, METHOD_NAIVE,
                         BatchEstimates, EstimatorConfig, UnitEstimates,
                         _batch_posterior_estimates, naive_batch)
from .mixture import log_component_density_parts
from .npmle import SieveConfig, em_weights, grid_axes, loo_weights_batch
from .numerics import log_normal_pdf, normal_quantile

RANK_TOL_FACTOR = 1e-10


@dataclass(frozen=True)
class LongRecord:
    """One outcome record: a unit id, an outcome, optional covariates and groups."""

    unit_id: str
    outcome: float
    covariates: Tuple[float, ...] = ()
    group: Tuple[str, ...] = ()


@dataclass
class PipelineConfig:
    sieve: SieveConfig = field(default_factory=SieveConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    methods: Tuple[str, ...] = (METHOD_HET,)
    min_bin_units: int = 50
    j_bands: Optional[Tuple[Tuple[int, int], ...]] = None  # None -> bin by exact J
    standardize: bool = False


def read_long_csv(text_or_lines, covariate_names: Optional[Sequence[str]] = None,
                  group_names: Sequence[str] = ()) -> Tuple[List[LongRecord], List[str]]:
    """Parse the canonical long CSV; returns (records, covariate names).

    The header must start with unit_id and outcome. Unless covariate names
    are given explicitly, every remaining non-group column is a covariate.
    """
    if isinstance(text_or_lines, str):
        text_or_lines = io.StringIO(text_or_lines)
    reader = csv.reader(text_or_lines)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyData("empty input file") from None
    header = [h.strip() for h in header]
    if header[:2] != ["unit_id", "outcome"]:
        raise DataError(f"header must begin with unit_id,outcome; got {header[:2]}")
    rest = header[2:]
    group_names = list(group_names)
    for g in group_names:
        if g not in rest:
            raise DataError(f"group column {g!r} not present")
    if covariate_names is None:
        covariate_names = [c for c in rest if c not in group_names]
    else:
        for c in covariate_names:
            if c not in rest:
                raise DataError(f"covariate column {c!r} not present")
    cov_idx = [header.index(c) for c in covariate_names]
    grp_idx = [header.index(g) for g in group_names]

    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            outcome = float(row[1])
            covs = tuple(float(row[i]) for i in cov_idx)
        except ValueError as exc:
            raise DataError(f"line {lineno}: non-numeric value ({exc})") from None
        if not math.isfinite(outcome) or not all(math.isfinite(v) for v in covs):
            raise DataError(f"line {lineno}: non-finite value")
        records.append(LongRecord(unit_id=row[0], outcome=outcome, covariates=covs,
                                  group=tuple(row[i] for i in grp_idx)))
    if not records:
        raise EmptyData("no data rows")
    return records, list(covariate_names)


def standardize_within_groups(records: Sequence[LongRecord]) -> List[LongRecord]:
    """Scale outcomes to mean 0, sd 1 within each group cell."""
    cells: Dict[Tuple[str, ...], List[int]] = {}
    for i, r in enumerate(records):
        cells.setdefault(r.group, []).append(i)
    out = list(records)
    y = np.array([r.outcome for r in records])
    for cell, idx in cells.items():
        vals = y[idx]
        sd = vals.std()
        if sd == 0.0:
            raise DataError(f"group cell {cell!r} has zero outcome variance")
        centered = (vals - vals.mean()) / sd
        for i, v in zip(idx, centered):
            out[i] = LongRecord(unit_id=out[i].unit_id, outcome=float(v),
                                covariates=out[i].covariates, group=out[i].group)
    return out


@dataclass
class ResidualizationResult:
    records: List[LongRecord]       # outcomes replaced by y - x' beta
    beta: Dict[str, float]
    r2_within: float
    n_units: int
    n_obs: int


def partial_out_covariates(records: Sequence[LongRecord],
                           covariate_names: Optional[Sequence[str]] = None) -> ResidualizationResult:
    """Remove covariate effects by within-unit demeaned OLS.

    The coefficient vector is estimated from within-unit variation only, then
    x'beta is subtracted from the raw outcome, leaving the unit effects in
    place. Covariate columns that are identically zero carry a zero
    coefficient; columns with no within-unit variation (or collinear ones)
    raise RankDeficient naming the offending columns.
    """
    if not records:
        raise EmptyData("no records")
    p = len(records[0].covariates)
    if p == 0:
        raise DataError("partial_out_covariates requires at least one covariate")
    if any(len(r.covariates) != p for r in records):
        raise LengthMismatch("covariate vectors must have uniform length")
    names = list(covariate_names) if covariate_names is not None else [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise LengthMismatch("covariate_names length mismatch")

    ids = [r.unit_id for r in records]
    uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    if np.any(counts < 2):
        offenders = [str(u) for u, c in zip(uniq, counts) if c < 2][:5]
        raise InsufficientWithinVariation(
            f"units with fewer than 2 records: {', '.join(offenders)}")

    y = np.array([r.outcome for r in records])
    X = np.array([r.covariates for r in records])

    zero_cols = ~np.any(X != 0.0, axis=0)
    active = np.flatnonzero(~zero_cols)
    beta = np.zeros(p)

    if active.size:
        Xa = X[:, active]
        unit_mean_y = np.bincount(inverse, weights=y) / counts
        y_t = y - unit_mean_y[inverse]
        X_t = np.empty_like(Xa)
        for c in range(Xa.shape[1]):
            m = np.bincount(inverse, weights=Xa[:, c]) / counts
            X_t[:, c] = Xa[:, c] - m[inverse]

        # Rank-revealing QR on the demeaned design.
        _, R, piv = scipy.linalg.qr(X_t, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = diag[0] * max(X_t.shape) * RANK_TOL_FACTOR if diag.size and diag[0] > 0 else 0.0
        rank = int(np.sum(diag > tol))
        if rank < Xa.shape[1]:
            offending = [names[active[j]] for j in piv[rank:]]
            raise RankDeficient(offending)

        coef, *_ = np.linalg.lstsq(X_t, y_t, rcond=None)
        beta[active] = coef
        resid = y_t - X_t @ coef
        ss_tot = float(y_t @ y_t)
        r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 0.0
    else:
        r2 = 0.0

    adjusted = y - X @ beta
    new_records = [LongRecord(unit_id=r.unit_id, outcome=float(v),
                              covariates=r.covariates, group=r.group)
                   for r, v in zip(records, adjusted)]
    return ResidualizationResult(records=new_records,
                                 beta={nm: float(b) for nm, b in zip(names, beta)},
                                 r2_within=r2, n_units=len(uniq), n_obs=len(records))


def records_to_observations(records: Sequence[LongRecord]) -> List[UnitObservations]:
    """Group records by unit, preserving first-appearance order."""
    by_unit: Dict[str, List[float]] = {}
    order: List[str] = []
    for r in records:
        if r.unit_id not in by_unit:
            by_unit[r.unit_id] = []
            order.append(r.unit_id)
        by_unit[r.unit_id].append(r.outcome)
    return [UnitObservations(uid, by_unit[uid]) for uid in order]


def _bin_label(lo: int, hi: int) -> str:
    return f"J={lo}" if lo == hi else f"J={lo}-{hi}"


def assign_bins(stats: Sequence[SufficientStats], config: PipelineConfig):
    """Group stats into J bins; returns ({label: [stats]}, n_dropped).

    With explicit bands, units outside every band are dropped (a sample
    restriction); with exact-J binning every unit lands in its own J bin.
    """
    bins: Dict[str, List[SufficientStats]] = {}
    dropped = 0
    if config.j_bands is None:
        for s in stats:
            bins.setdefault(_bin_label(s.j_count, s.j_count), []).append(s)
    else:
        for lo, hi in config.j_bands:
            if lo > hi:
                raise DataError(f"invalid band ({lo}, {hi})")
        for s in stats:
            placed = False
            for lo, hi in config.j_bands:
                if lo <= s.j_count <= hi:
                    bins.setdefault(_bin_label(lo, hi), []).append(s)
                    placed = True
                    break
            dropped += not placed
    return bins, dropped


def _hetj_arrays(stats: Sequence[SufficientStats]):
    y = np.array([s.y_bar for s in stats])
    s2 = np.array([s.s2 for s in stats])
    j = np.array([s.j_count for s in stats], dtype=float)
    k = (j - 1.0) / 2.0
    return y, s2, j, k


def _estimate_bin(stats: Sequence[SufficientStats], config: PipelineConfig) -> Dict[str, BatchEstimates]:
    """Run the configured methods on one bin, allowing per-unit J inside it."""
    y, s2, j, k = _hetj_arrays(stats)
    n = y.size
    rho = config.estimator.resolve_rho(n)
    alphas = config.estimator.alpha_list
    mu_points, sigma_points = grid_axes(y, np.sqrt(s2), n, config.sieve)
    out: Dict[str, BatchEstimates] = {}
    unit_ids = [s.unit_id for s in stats]

    het_variants = [m for m in config.methods if m in (METHOD_HET, METHOD_HET_FULL)]
    if het_variants:
        mus = np.tile(mu_points, sigma_points.size)
        sigmas = np.repeat(sigma_points, mu_points.size)
        log_phi, log_gam = log_component_density_parts(
            mus, sigmas, k[:, None], j[:, None], y, s2)
        logF = log_phi + log_gam
        m = mus.size
        w, loglik, iters, conv, min_step = em_weights(
            logF, np.full(m, 1.0 / m), config.sieve.max_em_iters, config.sieve.em_tol)
        mixture_table = [(float(wm), float(mm), float(sm))
                         for wm, mm, sm in zip(w, mus, sigmas) if wm > 0.0]
        for variant in het_variants:
            if variant == METHOD_HET and n >= 2:
                batch = loo_weights_batch(logF, w, config.sieve)
                with np.errstate(divide="ignore"):
                    log_w = np.log(batch.weights)
                step = min(min_step, batch.min_loglik_step)
            else:
                with np.errstate(divide="ignore"):
                    log_w = np.log(w)
                step = min_step
            mu_hat, sigma_hat, sigma2_hat, q_hat = _batch_posterior_estimates(
                y, s2, k[:, None], j[:, None], mus, sigmas, log_w, rho, alphas)
            out[variant] = BatchEstimates(
                method=variant, unit_ids=unit_ids, mu_hat=mu_hat, sigma_hat=sigma_hat,
                sigma2_hat=sigma2_hat, q_hat=q_hat,
                diagnostics={"min_loglik_step": step, "full_fit_iters": iters,
                             "full_fit_converged": conv, "final_loglik": loglik,
                             "mixture_table": mixture_table})

    if METHOD_HOM in config.methods:
        sigma2_common = float(np.mean(s2))
        sigma_common = math.sqrt(sigma2_common)
        logF = log_normal_pdf(y[:, None], mu_points, sigma2_common / j[:, None])
        m = mu_points.size
        w, loglik, iters, conv, min_step = em_weights(
            logF, np.full(m, 1.0 / m), config.sieve.max_em_iters, config.sieve.em_tol)
        if n >= 2:
            batch = loo_weights_batch(logF, w, config.sieve)
            with np.errstate(divide="ignore"):
                log_w = np.log(batch.weights)
            min_step = min(min_step, batch.min_loglik_step)
        else:
            with np.errstate(divide="ignore"):
                log_w = np.log(w)
        mu_hat, _, _, _ = _batch_posterior_estimates(
            y, s2, k[:, None], j[:, None], mu_points, np.full(m, sigma_common),
            log_w, rho, (), gamma_included=False)
        sigma_hat = np.full(n, sigma_common)
        sigma2_hat = np.full(n, sigma2_common)
        q_hat = {a: mu_hat + sigma_hat * normal_quantile(a) for a in alphas}
        out[METHOD_HOM] = BatchEstimates(
            method=METHOD_HOM, unit_ids=unit_ids, mu_hat=mu_hat, sigma_hat=sigma_hat,
            sigma2_hat=sigma2_hat, q_hat=q_hat,
            diagnostics={"min_loglik_step": min_step, "sigma2_common": sigma2_common,
                         "mixture_table": [(float(wm), float(mm), sigma_common)
                                           for wm, mm in zip(w, mu_points) if wm > 0.0]})

    if METHOD_NAIVE in config.methods:
        out[METHOD_NAIVE] = naive_batch(stats, alphas)
    return out


def bin_and_estimate(stats: Sequence[SufficientStats],
                     config: PipelineConfig) -> Tuple[List[UnitEstimates], Dict[str, object]]:
    """Per-bin estimation over a (possibly heterogeneous-J) dataset.

    Raises BinTooSmall if any bin holds fewer than config.min_bin_units.
    Returns the concatenated estimates (bins in sorted label order) and a
    diagnostics mapping.
    """
    if not stats:
        raise EmptyData("no units")
    bins, dropped = assign_bins(stats, config)
    if not bins:
        raise EmptyData("no units fall inside the configured bands")
    for label in sorted(bins):
        count = len(bins[label])
        if count < config.min_bin_units:
            raise BinTooSmall(label, count, config.min_bin_units)

    estimates: List[UnitEstimates] = []
    diag: Dict[str, object] = {"bins": {}, "dropped_units": dropped}
    for label in sorted(bins):
        batches = _estimate_bin(bins[label], config)
        min_step = min((b.diagnostics.get("min_loglik_step", 0.0) for b in batches.values()),
                       default=0.0)
        bin_diag = {"units": len(bins[label]), "min_loglik_step": min_step,
                    "mixtures": {}, "fits": {}}
        for method, batch in batches.items():
            table = batch.diagnostics.get("mixture_table")
            if table is not None:
                bin_diag["mixtures"][method] = table
            fit_info = {key: batch.diagnostics[key]
                        for key in ("final_loglik", "full_fit_iters", "full_fit_converged")
                        if key in batch.diagnostics}
            if fit_info:
                bin_diag["fits"][method] = fit_info
        diag["bins"][label] = bin_diag
        for method in config.methods:
            estimates.extend(batches[method].to_unit_estimates())
    return estimates, diag


def mixtures_to_csv(bin_diag: Dict[str, object]) -> str:
    """Fitted mixing-distribution tables, long form: bin, method, weight, mu, sigma."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "method", "weight", "mu", "sigma"])
    for label in sorted(bin_diag["bins"]):
        mixtures = bin_diag["bins"][label].get("mixtures", {})
        for method in sorted(mixtures):
            for weight, mu, sigma in mixtures[method]:
                writer.writerow([label, method, repr(weight), repr(mu), repr(sigma)])
    return buf.getvalue()


def q_column_name(alpha: float) -> str:
    return f"q{alpha * 100:g}_hat"


def estimates_to_csv(estimates: Sequence[UnitEstimates]) -> str:
    """Serialize estimate rows; floats use shortest round-trip decimals."""
    alphas = sorted({a for e in estimates for a in e.q_hat})
    fields = ["unit_id", "method", "mu_hat", "sigma_hat", "sigma2_hat"] + \
        [q_column_name(a) for a in alphas]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for e in estimates:
        row = [e.unit_id, e.method, repr(e.mu_hat), repr(e.sigma_hat), repr(e.sigma2_hat)]
        row += [repr(e.q_hat[a]) if a in e.q_hat else "" for a in alphas]
        writer.writerow(row)
    return buf.getvalue()


def estimates_from_csv(text: str) -> List[UnitEstimates]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    expected = ["unit_id", "method", "mu_hat", "sigma_hat", "sigma2_hat"]
    if header[:5] != expected:
        raise DataError(f"estimate CSV header must begin with {expected}")
    alphas = []
    for col in header[5:]:
        if not (col.startswith("q") and col.endswith("_hat")):
            raise DataError(f"unexpected column {col!r}")
        alphas.append(float(col[1:-4]) / 100.0)
    out = []
    for row in reader:
        if not row:
            continue
        q = {a: float(v) for a, v in zip(alphas, row[5:]) if v != ""}
        out.append(UnitEstimates(unit_id=row[0], method=row[1], mu_hat=float(row[2]),
                                 sigma_hat=float(row[3]), sigma2_hat=float(row[4]), q_hat=q))
    return out
