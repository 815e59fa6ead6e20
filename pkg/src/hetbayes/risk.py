"""Loss functions, relative regrets, and threshold flagging.

Averages use exact compensated summation (math.fsum) so reported regrets do
not depend on accumulation order.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import LengthMismatch, ZeroOracleLoss


def _paired(estimates, truths):
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    if e.shape != t.shape or e.ndim != 1:
        raise LengthMismatch(f"estimates and truths must be equal-length vectors, got {e.shape} vs {t.shape}")
    if e.size == 0:
        raise LengthMismatch("need at least one pair")
    return e, t


def mse_loss(estimates, truths) -> float:
    """Mean squared deviation (1/n) sum (estimate - truth)^2."""
    e, t = _paired(estimates, truths)
    return math.fsum((e - t) ** 2) / e.size


def detection_loss(estimates, truths, c: float) -> float:
    """Mean misclassification loss for flagging truths at or below c.

    Each unit contributes |truth - c| when the estimate and the truth fall on
    opposite sides of the threshold (ties at c count as flagged).
    """
    e, t = _paired(estimates, truths)
    est_flag = e <= c
    true_flag = t <= c
    miss = est_flag != true_flag
    return math.fsum(np.abs(t - c) * miss) / e.size


@dataclass(frozen=True)
class FlagResult:
    unit_ids: frozenset
    count: int


def flag_below_threshold(estimates: Mapping[str, float], c: float) -> FlagResult:
    """Units whose estimate is at or below the threshold (ties flagged)."""
    flagged = frozenset(uid for uid, v in estimates.items() if v <= c)
    return FlagResult(unit_ids=flagged, count=len(flagged))


def relative_regret(method_losses: Sequence[float], oracle_losses: Sequence[float]) -> float:
    """(mean method loss - mean oracle loss) / mean oracle loss across rounds."""
    if len(method_losses) != len(oracle_losses):
        raise LengthMismatch("per-round loss lists must have equal length")
    if len(method_losses) == 0:
        raise LengthMismatch("need at least one round")
    mean_m = math.fsum(method_losses) / len(method_losses)
    mean_o = math.fsum(oracle_losses) / len(oracle_losses)
    if mean_o <= 0.0:
        raise ZeroOracleLoss("mean oracle loss must be positive")
    return (mean_m - mean_o) / mean_o


def _round_sig(x: float, digits: int = 4) -> float:
    """Serialized regrets carry 4 significant digits; losses keep full precision."""
    if x == 0.0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


@dataclass
class RegretReport:
    """Per-target regret summary of one experiment cell.

    `loss` is "mse" or "detect"; detection rows carry the threshold.
    """

    target: str
    loss: str
    n: int
    j_count: int
    rounds: int
    seed: int
    dgp: Dict[str, float]
    method_mean_loss: Dict[str, float]
    oracle_mean_loss: float
    relative_regret: Dict[str, float]
    threshold: Optional[float] = None

    def rows(self):
        for method in self.method_mean_loss:
            yield {
                "target": self.target,
                "loss": self.loss,
                "threshold": "" if self.threshold is None else repr(self.threshold),
                "method": method,
                "n": self.n,
                "j_count": self.j_count,
                "rounds": self.rounds,
                "seed": self.seed,
                "mean_loss": repr(self.method_mean_loss[method]),
                "oracle_mean_loss": repr(self.oracle_mean_loss),
                "relative_regret": repr(_round_sig(self.relative_regret[method])),
            }


CSV_FIELDS = ["target", "loss", "threshold", "method", "n", "j_count", "rounds",
              "seed", "mean_loss", "oracle_mean_loss", "relative_regret"]


def reports_to_csv(reports: Iterable[RegretReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        for row in report.rows():
            writer.writerow(row)
    return buf.getvalue()


def reports_to_json(reports: Iterable[RegretReport]) -> str:
    payload = []
    for r in reports:
        payload.append({
            "target": r.target,
            "loss": r.loss,
            "threshold": r.threshold,
            "n": r.n,
            "j_count": r.j_count,
            "rounds": r.rounds,
            "seed": r.seed,
            "dgp": r.dgp,
            "method_mean_loss": r.method_mean_loss,
            "oracle_mean_loss": r.oracle_mean_loss,
            "relative_regret": {m: _round_sig(v) for m, v in r.relative_regret.items()},
        })
    return json.dumps(payload, indent=2, sort_keys=True)
