"""Learn-then-Test calibration of the stopping threshold.

For each threshold on a descending grid the deployed procedure is run over a
held-out calibration set, the count of losses ``k`` is turned into an exact
lower-tail binomial p-value under ``Binom(n, delta)``, and fixed-sequence
testing walks the grid from conservative to aggressive, stopping at the first
p-value above ``epsilon``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import Trajectory
from .errors import ContractError
from .probe import ProbeConfig, SlowWeights
from .runtime import LossMode, RiskSpec, ScorePaths, compute_paths, loss_bits, stop_indices
from .trainer import LabelMode

__all__ = [
    "LossMode", "RiskSpec", "ThresholdGrid", "ThresholdRecord", "CalibrationResult",
    "binom_tail_pvalue", "fixed_sequence_select", "empirical_risk", "calibrate",
    "calibrate_paths", "conformal_quantile",
]


@dataclass(frozen=True)
class ThresholdGrid:
    thresholds: tuple

    def __post_init__(self) -> None:
        th = tuple(float(x) for x in self.thresholds)
        if not th:
            raise ContractError("threshold grid is empty")
        if any(a <= b for a, b in zip(th, th[1:])):
            raise ContractError("thresholds must be strictly decreasing")
        if any(not 0.0 <= x <= 1.0 for x in th):
            raise ContractError("thresholds must lie in [0, 1]")
        object.__setattr__(self, "thresholds", th)

    @classmethod
    def uniform(cls, m: int = 99, lo: float = 0.01, hi: float = 0.99) -> "ThresholdGrid":
        return cls(tuple(np.linspace(hi, lo, m)))

    @classmethod
    def from_scores(cls, scores: np.ndarray, m: int = 99) -> "ThresholdGrid":
        """Grid at score quantiles, deduplicated, conservative first."""
        scores = np.asarray(scores, dtype=np.float64)
        scores = scores[np.isfinite(scores)]
        qs = np.quantile(scores, np.linspace(1.0, 0.0, m))
        return cls(tuple(np.unique(qs)[::-1]))

    def __len__(self) -> int:
        return len(self.thresholds)


@dataclass
class ThresholdRecord:
    lam: float
    risk: float
    losses: int
    pvalue: float
    rejected: bool


@dataclass
class CalibrationResult:
    lambda_star: Optional[float]
    records: List[ThresholdRecord]
    n: int
    spec: RiskSpec

    @property
    def rejected(self) -> List[float]:
        return [r.lam for r in self.records if r.rejected]


def binom_tail_pvalue(n: int, delta: float, k: int) -> float:
    """``P(Binom(n, delta) <= k)`` summed exactly in log space."""
    if n < 1:
        raise ContractError("n must be positive")
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside [0, {n}]")
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    if k == n:
        return 1.0
    ld, l1d = math.log(delta), math.log1p(-delta)
    lgn = math.lgamma(n + 1)

    def log_terms(lo: int, hi: int) -> float:
        acc = -math.inf
        for i in range(lo, hi + 1):
            acc = np.logaddexp(acc, lgn - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * ld + (n - i) * l1d)
        return float(acc)

    if k < n * delta:
        return min(1.0, math.exp(log_terms(0, k)))
    # above the mean the lower tail is close to 1; 1 - upper tail keeps it accurate
    return -math.expm1(log_terms(k + 1, n))


def fixed_sequence_select(pvalues: Sequence[float], epsilon: float) -> Optional[int]:
    """0-based index of the last hypothesis rejected before the first failure."""
    if len(pvalues) == 0:
        raise ContractError("no p-values to test")
    last = None
    for j, p in enumerate(pvalues):
        if p > epsilon:
            break
        last = j
    return last


def calibrate_paths(paths: ScorePaths, grid: Optional[ThresholdGrid], spec: RiskSpec) -> CalibrationResult:
    grid = grid or ThresholdGrid.uniform()
    n = len(paths)
    idx, stopped = stop_indices(paths, grid.thresholds)
    bits = loss_bits(paths, idx, stopped, spec.loss_mode)
    ks = bits.sum(axis=0)
    pvals = [binom_tail_pvalue(n, spec.delta, int(k)) for k in ks]
    j = fixed_sequence_select(pvals, spec.epsilon)
    records = [
        ThresholdRecord(lam, int(k) / n, int(k), p, j is not None and i <= j)
        for i, (lam, k, p) in enumerate(zip(grid.thresholds, ks, pvals))
    ]
    return CalibrationResult(None if j is None else grid.thresholds[j], records, n, spec)


def empirical_risk(
    slow: SlowWeights,
    lam: Optional[float],
    cal_set: Sequence[Trajectory],
    spec: RiskSpec,
    probe_cfg: ProbeConfig,
    mode: LabelMode,
):
    """Mean loss of the deployed procedure at threshold ``lam`` and the per-instance bits."""
    paths = compute_paths(slow, probe_cfg, cal_set, spec.budget, mode)
    idx, stopped = stop_indices(paths, [lam])
    bits = loss_bits(paths, idx, stopped, spec.loss_mode)[:, 0]
    return float(bits.mean()), bits


def calibrate(
    slow: SlowWeights,
    cal_set: Sequence[Trajectory],
    grid: Optional[ThresholdGrid],
    spec: RiskSpec,
    probe_cfg: ProbeConfig,
    mode: LabelMode,
) -> CalibrationResult:
    """LTT over the grid. The calibration set must be disjoint from the training data."""
    paths = compute_paths(slow, probe_cfg, cal_set, spec.budget, mode)
    return calibrate_paths(paths, grid, spec)


def conformal_quantile(scores: Sequence[float], epsilon_cov: float) -> float:
    """Split-conformal threshold: order statistic at rank ceil((n+1)(1-eps)), clipped to n."""
    if not 0.0 < epsilon_cov < 1.0:
        raise ContractError("epsilon_cov must lie in (0, 1)")
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ContractError("no scores")
    n = s.size
    # guard against (n+1)(1-eps) landing a hair above an integer
    rank = min(n, math.ceil((n + 1) * (1.0 - epsilon_cov) - 1e-9))
    return float(s[max(rank, 1) - 1])
