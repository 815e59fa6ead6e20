"""Command-line interface.

Subcommands: simulate, calibrate, estimate, detect, regret. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure. Diagnostics go
to stderr as single lines of the form ``LEVEL key=value ...``.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import compute_sufficient_stats
from .dgp import DgpSpec, MomentTargets, calibrate_dgp
from .errors import DataError, HetbayesError, NumericalError
from .estimators import (METHOD_HET, METHOD_HET_FULL, METHOD_HOM, METHOD_NAIVE,
                         METHOD_ORACLE, EstimatorConfig, UnitEstimates)
from .npmle import SieveConfig
from .oracle import OracleSpec, oracle_batch
from .pipeline import (PipelineConfig, bin_and_estimate, estimates_from_csv,
                       estimates_to_csv, mixtures_to_csv, partial_out_covariates,
                       q_column_name, read_long_csv, records_to_observations,
                       standardize_within_groups)
from .risk import (RegretReport, flag_below_threshold, mse_loss, relative_regret,
                   reports_to_csv, reports_to_json)
from .simulation import ExperimentSpec, run_experiment, target_alpha

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def diag(level: str, **kv):
    parts = [level.upper()]
    for key, value in kv.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    print(" ".join(parts), file=sys.stderr)


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"invalid config file {path}: {exc}") from None


def _dgp_from_config(cfg: dict):
    """A DgpSpec or MomentTargets from the [dgp] table."""
    table = cfg.get("dgp")
    if table is None:
        raise DataError("config is missing a [dgp] table")
    moment_keys = {"e_mu", "v_mu", "e_sigma2", "v_sigma2", "cor_mu_sigma2"}
    param_keys = {"alpha", "nu", "kappa", "lam", "rho_copula"}
    keys = set(table)
    if keys == moment_keys:
        return MomentTargets(**table)
    if keys == param_keys:
        return DgpSpec(**table)
    raise DataError(f"[dgp] must contain exactly {sorted(moment_keys)} or {sorted(param_keys)}")


def _grid_from_value(value) -> tuple:
    """A threshold grid from an explicit list or a {lo, hi, points} table."""
    if isinstance(value, dict):
        expected = {"lo", "hi", "points"}
        if set(value) != expected:
            raise DataError(f"grid table must have keys {sorted(expected)}")
        return tuple(np.linspace(value["lo"], value["hi"], int(value["points"])).tolist())
    return tuple(float(v) for v in value)


def _sieve_from_config(cfg: dict) -> SieveConfig:
    table = dict(cfg.get("sieve", {}))
    allowed = {"sigma_lower", "max_em_iters", "em_tol", "loo_max_iters"}
    unknown = set(table) - allowed
    if unknown:
        raise DataError(f"unknown [sieve] keys: {sorted(unknown)}")
    return SieveConfig(**table)


def _experiment_from_config(cfg: dict, args) -> ExperimentSpec:
    exp = dict(cfg.get("experiment", {}))
    detection = {t: _grid_from_value(v) for t, v in exp.pop("detection_grids", {}).items()}
    est = dict(cfg.get("estimator", {}))
    rho = est.get("rho")
    allowed = {"n_list", "j_count", "rounds", "seed", "estimators", "targets",
               "oracle_nodes", "threads"}
    unknown = set(exp) - allowed
    if unknown:
        raise DataError(f"unknown [experiment] keys: {sorted(unknown)}")
    for tuple_key in ("n_list", "estimators", "targets", "oracle_nodes"):
        if tuple_key in exp:
            exp[tuple_key] = tuple(exp[tuple_key])
    spec = ExperimentSpec(dgp=_dgp_from_config(cfg), detection_grids=detection,
                          sieve=_sieve_from_config(cfg), rho=rho, **exp)
    if args.seed is not None:
        spec.seed = args.seed
    if args.threads is not None:
        spec.threads = args.threads
    return spec


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    diag("info", wrote=path)


def _out_dir(args) -> str:
    out = args.output_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_simulate(args) -> int:
    if not args.config:
        raise UsageError("simulate requires --config")
    spec = _experiment_from_config(_load_toml(args.config), args)
    diag("info", stage="simulate", n_list=",".join(map(str, spec.n_list)),
         rounds=spec.rounds, seed=spec.seed, threads=spec.threads)
    result = run_experiment(spec)
    out = _out_dir(args)
    _write(os.path.join(out, "regrets.csv"), reports_to_csv(result.reports))
    _write(os.path.join(out, "regrets.json"), reports_to_json(result.reports))
    _write(os.path.join(out, "diagnostics.json"),
           json.dumps(result.diagnostics, indent=2, sort_keys=True))
    if not args.no_figures:
        from .figures import plot_detection_regret, plot_regret_vs_n
        for path in plot_regret_vs_n(result.reports, out):
            diag("info", wrote=path)
        for path in plot_detection_regret(result.reports, out):
            diag("info", wrote=path)
    diag("info", stage="done", min_loglik_step=result.diagnostics["min_loglik_step"])
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    if args.config:
        dgp_in = _dgp_from_config(_load_toml(args.config))
        if isinstance(dgp_in, DgpSpec):
            raise DataError("config already pins copula parameters; nothing to calibrate")
        targets = dgp_in
    else:
        required = [args.e_mu, args.v_mu, args.e_sigma2, args.v_sigma2, args.cor]
        if any(v is None for v in required):
            raise UsageError("calibrate needs --config or all of "
                             "--e-mu --v-mu --e-sigma2 --v-sigma2 --cor")
        targets = MomentTargets(e_mu=args.e_mu, v_mu=args.v_mu, e_sigma2=args.e_sigma2,
                                v_sigma2=args.v_sigma2, cor_mu_sigma2=args.cor)
    spec = calibrate_dgp(targets)
    payload = spec.describe()
    out = _out_dir(args)
    if args.format == "json":
        _write(os.path.join(out, "dgp.json"), json.dumps(payload, indent=2, sort_keys=True))
    else:
        lines = ["parameter,value"] + [f"{k},{v!r}" for k, v in payload.items()]
        _write(os.path.join(out, "dgp.csv"), "\n".join(lines) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def _split_csv_arg(value: Optional[str]) -> List[str]:
    if not value:
        return []
    return [v.strip() for v in value.split(",") if v.strip()]


def _parse_bands(value: Optional[str]):
    if not value:
        return None
    bands = []
    for part in value.split(","):
        lo, _, hi = part.partition(":")
        try:
            bands.append((int(lo), int(hi or lo)))
        except ValueError:
            raise UsageError(f"invalid J band {part!r}; expected lo:hi") from None
    return tuple(bands)


def _cmd_estimate(args) -> int:
    methods = tuple(_split_csv_arg(args.methods) or [METHOD_HET, METHOD_HOM, METHOD_NAIVE])
    known = {METHOD_HET, METHOD_HET_FULL, METHOD_HOM, METHOD_NAIVE}
    if set(methods) - known:
        raise UsageError(f"unknown methods: {sorted(set(methods) - known)}")
    alphas = tuple(float(a) for a in _split_csv_arg(args.alphas)) or (0.1,)

    with open(args.input, "r", encoding="utf-8") as fh:
        records, cov_names = read_long_csv(
            fh, covariate_names=_split_csv_arg(args.covariates) or None,
            group_names=_split_csv_arg(args.group_cols))
    diag("info", stage="ingest", records=len(records), covariates=len(cov_names))

    if args.standardize:
        records = standardize_within_groups(records)
        diag("info", stage="standardize")
    resid_info = None
    if cov_names:
        result = partial_out_covariates(records, cov_names)
        records = result.records
        resid_info = {"beta": result.beta, "r2_within": result.r2_within,
                      "n_units": result.n_units, "n_obs": result.n_obs}
        diag("info", stage="residualize", r2_within=result.r2_within)

    observations = records_to_observations(records)
    stats = [compute_sufficient_stats(o) for o in observations]

    config = PipelineConfig(
        sieve=SieveConfig(sigma_lower=args.sigma_lower),
        estimator=EstimatorConfig(rho=args.rho, alpha_list=alphas),
        methods=methods,
        min_bin_units=args.min_bin_units,
        j_bands=_parse_bands(args.j_bands),
    )
    estimates, bin_diag = bin_and_estimate(stats, config)

    if args.oracle_config:
        dgp_in = _dgp_from_config(_load_toml(args.oracle_config))
        dgp = calibrate_dgp(dgp_in) if isinstance(dgp_in, MomentTargets) else dgp_in
        by_j: Dict[int, list] = {}
        for s in stats:
            by_j.setdefault(s.j_count, []).append(s)
        for j_count in sorted(by_j):
            spec = OracleSpec(prior=dgp, j_count=j_count)
            estimates.extend(oracle_batch(by_j[j_count], spec, alphas).to_unit_estimates())
        diag("info", stage="oracle", j_groups=len(by_j))

    out = _out_dir(args)
    _write(os.path.join(out, "estimates.csv"), estimates_to_csv(estimates))
    _write(os.path.join(out, "mixtures.csv"), mixtures_to_csv(bin_diag))
    meta = {"bins": bin_diag, "residualization": resid_info, "methods": list(methods)}
    _write(os.path.join(out, "estimate_diagnostics.json"),
           json.dumps(meta, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_thresholds(value: str) -> List[float]:
    if ":" in value:
        lo, hi, count = value.split(":")
        return np.linspace(float(lo), float(hi), int(count)).tolist()
    return [float(v) for v in value.split(",")]


def _estimate_column(e: UnitEstimates, target: str) -> float:
    alpha = target_alpha(target)
    if target == "mu":
        return e.mu_hat
    if target == "sigma":
        return e.sigma_hat
    if target == "sigma2":
        return e.sigma2_hat
    if alpha not in e.q_hat:
        raise DataError(f"estimates file lacks column {q_column_name(alpha)}")
    return e.q_hat[alpha]


def _cmd_detect(args) -> int:
    with open(args.estimates, "r", encoding="utf-8") as fh:
        estimates = estimates_from_csv(fh.read())
    thresholds = _parse_thresholds(args.thresholds)
    methods = sorted({e.method for e in estimates})
    counts: Dict[str, Dict[float, int]] = {}
    id_rows = []
    count_rows = []
    for method in methods:
        values = {e.unit_id: _estimate_column(e, args.target)
                  for e in estimates if e.method == method}
        counts[method] = {}
        for c in thresholds:
            flags = flag_below_threshold(values, c)
            counts[method][c] = flags.count
            count_rows.append({"method": method, "threshold": c, "count": flags.count})
            for uid in sorted(flags.unit_ids):
                id_rows.append({"method": method, "threshold": c, "unit_id": uid})

    out = _out_dir(args)
    if args.format == "json":
        _write(os.path.join(out, "flag_counts.json"),
               json.dumps(count_rows, indent=2, sort_keys=True))
    else:
        lines = ["method,threshold,count"] + [
            f"{r['method']},{r['threshold']!r},{r['count']}" for r in count_rows]
        _write(os.path.join(out, "flag_counts.csv"), "\n".join(lines) + "\n")
    lines = ["method,threshold,unit_id"] + [
        f"{r['method']},{r['threshold']!r},{r['unit_id']}" for r in id_rows]
    _write(os.path.join(out, "flagged_units.csv"), "\n".join(lines) + "\n")
    if not args.no_figures:
        from .figures import plot_flag_counts
        diag("info", wrote=plot_flag_counts(counts, args.target, out))
    return EXIT_OK


def _read_truths(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        import csv as _csv
        reader = _csv.reader(fh)
        header = next(reader)
        if header[:3] != ["unit_id", "mu", "sigma"]:
            raise DataError("truths CSV header must be unit_id,mu,sigma")
        truths = {}
        for row in reader:
            if not row:
                continue
            truths[row[0]] = (float(row[1]), float(row[2]))
    if not truths:
        raise DataError("no truth rows")
    return truths


def _truth_column(mu: float, sigma: float, target: str) -> float:
    from .numerics import normal_quantile
    alpha = target_alpha(target)
    if target == "mu":
        return mu
    if target == "sigma":
        return sigma
    if target == "sigma2":
        return sigma * sigma
    return mu + sigma * normal_quantile(alpha)


def _cmd_regret(args) -> int:
    with open(args.estimates, "r", encoding="utf-8") as fh:
        estimates = estimates_from_csv(fh.read())
    truths = _read_truths(args.truths)
    targets = _split_csv_arg(args.targets) or ["mu", "q0.1"]
    methods = sorted({e.method for e in estimates})
    if METHOD_ORACLE not in methods:
        raise DataError("estimates file carries no ORACLE rows; regrets need an oracle baseline "
                        "(produce one with `estimate --oracle-config`)")

    by_method: Dict[str, List[UnitEstimates]] = {m: [] for m in methods}
    for e in estimates:
        by_method[e.method].append(e)
    reports = []
    for target in targets:
        losses = {}
        for method in methods:
            rows = [e for e in by_method[method] if e.unit_id in truths]
            if not rows:
                raise DataError(f"no estimate rows with matching truths for method {method}")
            est = [_estimate_column(e, target) for e in rows]
            tru = [_truth_column(*truths[e.unit_id], target) for e in rows]
            losses[method] = mse_loss(est, tru)
        oracle_loss = losses[METHOD_ORACLE]
        reports.append(RegretReport(
            target=target, loss="mse", n=len(truths), j_count=0, rounds=1,
            seed=args.seed if args.seed is not None else 0, dgp={},
            method_mean_loss=losses, oracle_mean_loss=oracle_loss,
            relative_regret={m: relative_regret([losses[m]], [oracle_loss]) for m in methods},
        ))
    out = _out_dir(args)
    if args.format == "json":
        _write(os.path.join(out, "regrets.json"), reports_to_json(reports))
    else:
        _write(os.path.join(out, "regrets.csv"), reports_to_csv(reports))
    return EXIT_OK


def build_parser() -> _Parser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="override the config seed")
    shared.add_argument("--config", default=None, help="TOML config file")
    shared.add_argument("--threads", type=int, default=None, help="worker processes")
    shared.add_argument("--output-dir", default=None, help="directory for outputs")
    shared.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = _Parser(prog="hetbayes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared],
                       help="run a regret experiment from a config file")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate", parents=[shared],
                       help="solve copula parameters from moment targets")
    p.add_argument("--e-mu", type=float, default=None)
    p.add_argument("--v-mu", type=float, default=None)
    p.add_argument("--e-sigma2", type=float, default=None)
    p.add_argument("--v-sigma2", type=float, default=None)
    p.add_argument("--cor", type=float, default=None)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("estimate", parents=[shared],
                       help="estimate unit parameters from a long CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--methods", default=None, help="comma list: HET,HET_FULL,HOM,NAIVE")
    p.add_argument("--alphas", default=None, help="comma list of quantile levels")
    p.add_argument("--rho", type=float, default=None, help="density floor (default 1/n)")
    p.add_argument("--sigma-lower", type=float, default=None)
    p.add_argument("--covariates", default=None, help="comma list of covariate columns")
    p.add_argument("--group-cols", default=None, help="comma list of grouping columns")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--j-bands", default=None, help="comma list of lo:hi class-size bands")
    p.add_argument("--min-bin-units", type=int, default=50)
    p.add_argument("--oracle-config", default=None,
                   help="true-DGP config; adds ORACLE rows (simulation mode)")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("detect", parents=[shared],
                       help="flag units with estimates at or below thresholds")
    p.add_argument("--estimates", required=True)
    p.add_argument("--target", default="mu")
    p.add_argument("--thresholds", required=True, help="lo:hi:count or comma list")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("regret", parents=[shared],
                       help="mean losses and relative regrets from estimate/truth files")
    p.add_argument("--estimates", required=True)
    p.add_argument("--truths", required=True)
    p.add_argument("--targets", default=None, help="comma list (default mu,q0.1)")
    p.set_defaults(func=_cmd_regret)
    return parser


def _diag_showwarning(message, category, filename, lineno, file=None, line=None):
    diag("warning", kind=category.__name__, msg=json.dumps(str(message)))


def cli_main(argv: Sequence[str]) -> int:
    parser = build_parser()
    import warnings
    warnings.showwarning = _diag_showwarning
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        diag("error", kind="usage", msg=json.dumps(str(exc)))
        return EXIT_USAGE
    except NumericalError as exc:
        diag("error", kind=type(exc).__name__, msg=json.dumps(str(exc)))
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as exc:
        diag("error", kind=type(exc).__name__, msg=json.dumps(str(exc)))
        return EXIT_DATA
    except HetbayesError as exc:
        diag("error", kind=type(exc).__name__, msg=json.dumps(str(exc)))
        return EXIT_DATA


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
