"""Deployed stopping rule and set-level evaluation.

:func:`run_with_stopping` is the literal deployed procedure: score, compare the
smoothed score with the threshold, stop without updating or update with
``C_t = 0`` and continue. For whole sets the same procedure is evaluated in
batch: because the score path before the stopping step does not depend on the
threshold, one never-stopping pass yields the stopping step for every
threshold at once (first crossing of the smoothed score).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .data import Trajectory, pad_embeddings
from .errors import ContractError
from .probe import FastState, ProbeConfig, SlowWeights, advance, batch_raw_scores, smooth_rows
from .trainer import LabelMode, build_labels

CHUNK = 256


class LossMode(str, enum.Enum):
    EMITTED_INCORRECT = "emitted_incorrect"
    EARLY_STOP_ONLY = "early_stop_only"


@dataclass(frozen=True)
class RiskSpec:
    delta: float
    epsilon: float = 0.05
    budget: Optional[int] = None  # None: each trajectory's own length
    loss_mode: LossMode = LossMode.EMITTED_INCORRECT

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        if not 0.0 < self.delta < 1.0:
            raise ContractError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.budget is not None and self.budget < 1:
            raise ContractError("budget must be a positive integer")


@dataclass
class RunOutcome:
    stop_step: int  # 1-based
    stopped_early: bool
    raw_scores: List[float]
    smoothed_scores: List[float]
    length: int
    emitted_label: Optional[int] = None
    token_savings: Optional[float] = None

    @property
    def step_savings(self) -> float:
        return 1.0 - self.stop_step / self.length


def run_with_stopping(
    slow: SlowWeights,
    probe_cfg: ProbeConfig,
    lambda_star: Optional[float],
    traj: Trajectory,
    budget: Optional[int] = None,
    labels: Optional[np.ndarray] = None,
) -> RunOutcome:
    """Run the deployed procedure on one trajectory from a fresh fast state."""
    slow.check(probe_cfg)
    T = len(traj) if budget is None else min(budget, len(traj))
    fast = FastState.fresh(slow)
    raws: List[float] = []
    smooths: List[float] = []
    stop, stopped = T, False
    for t in range(T):
        phi = traj.embeddings[t]
        # advance() scores first; its update is discarded when we stop here
        raw, smoothed, nxt = advance(fast, slow, probe_cfg, phi, 0)
        raws.append(raw)
        smooths.append(smoothed)
        if lambda_star is not None and smoothed >= lambda_star:
            stop, stopped = t + 1, True
            break
        fast = nxt
    out = RunOutcome(stop, stopped, raws, smooths, T)
    if labels is not None:
        out.emitted_label = int(labels[stop - 1])
    if traj.tokens is not None:
        out.token_savings = 1.0 - float(traj.tokens[:stop].sum()) / float(traj.tokens[:T].sum())
    return out


@dataclass
class ScorePaths:
    """Never-stopping deployed score paths for a set, padded to ``(N, T)``."""

    raw: np.ndarray
    smoothed: np.ndarray
    lengths: np.ndarray
    labels: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.raw.shape[0]


def compute_paths(
    slow: SlowWeights,
    probe_cfg: ProbeConfig,
    trajs: Sequence[Trajectory],
    budget: Optional[int] = None,
    mode: Optional[LabelMode] = None,
    executor=None,
) -> ScorePaths:
    """Score every trajectory once; fixed-size chunks keep results independent of ``executor``."""
    if not trajs:
        raise ContractError("empty trajectory set")
    chunks = [trajs[i : i + CHUNK] for i in range(0, len(trajs), CHUNK)]

    def work(chunk):
        phi, lengths = pad_embeddings(chunk, budget)
        raw = batch_raw_scores(slow, probe_cfg, phi)
        return raw, lengths

    results = list(executor.map(work, chunks)) if executor is not None else [work(c) for c in chunks]
    lengths = np.concatenate([r[1] for r in results])
    T = int(lengths.max())
    raw = np.zeros((len(trajs), T))
    row = 0
    for r, _ in results:
        raw[row : row + r.shape[0], : r.shape[1]] = r
        row += r.shape[0]
    smoothed = smooth_rows(raw, probe_cfg.smoothing_window)
    valid = np.arange(T)[None, :] < lengths[:, None]
    raw[~valid] = np.nan
    smoothed[~valid] = np.nan

    labels = None
    if mode is not None:
        labels = np.zeros((len(trajs), T), dtype=np.int8)
        for i, tr in enumerate(trajs):
            labels[i, : lengths[i]] = build_labels(tr, mode)[: lengths[i]]
    tokens = None
    if all(tr.tokens is not None for tr in trajs):
        tokens = np.zeros((len(trajs), T), dtype=np.int64)
        for i, tr in enumerate(trajs):
            tokens[i, : lengths[i]] = tr.tokens[: lengths[i]]
    return ScorePaths(raw, smoothed, lengths, labels, tokens)


def stop_indices(paths: ScorePaths, lambdas) -> tuple:
    """0-based stopping index and early-stop flag for each (trajectory, threshold).

    ``lambdas`` entries may be ``None`` (never stop). Returns arrays of shape ``(N, m)``.
    """
    lambdas = list(lambdas)
    N, T = paths.smoothed.shape
    lam = np.array([np.inf if l is None else l for l in lambdas], dtype=np.float64)
    running = np.fmax.accumulate(np.where(np.isnan(paths.smoothed), -np.inf, paths.smoothed), axis=1)
    valid = np.arange(T)[None, :] < paths.lengths[:, None]
    counts = np.empty((N, lam.size), dtype=np.int64)
    for j, l in enumerate(lam):
        counts[:, j] = ((running < l) & valid).sum(axis=1)
    stopped = counts < paths.lengths[:, None]
    idx = np.minimum(counts, paths.lengths[:, None] - 1)
    return idx, stopped


def loss_bits(paths: ScorePaths, idx: np.ndarray, stopped: np.ndarray, loss_mode: LossMode) -> np.ndarray:
    if paths.labels is None:
        raise ContractError("loss bits need labels")
    emitted = np.take_along_axis(paths.labels, idx, axis=1)
    if LossMode(loss_mode) is LossMode.EMITTED_INCORRECT:
        return (emitted == 0).astype(np.int8)
    early = stopped & (idx < paths.lengths[:, None] - 1)
    return (early & (emitted == 0)).astype(np.int8)


@dataclass
class EvalReport:
    n: int
    savings_step: float
    savings_token: Optional[float]
    error_rate: float
    per_problem_savings: np.ndarray = field(repr=False)
    threshold: Optional[float] = None
    spec: Optional[RiskSpec] = None
    stop_steps: Optional[np.ndarray] = field(default=None, repr=False)
    loss_bits: Optional[np.ndarray] = field(default=None, repr=False)


def savings_from_stops(stops: Sequence[int], totals: Sequence[int]) -> float:
    """``1 - mean(stop) / mean(total)``: ratio of means, not mean of ratios."""
    stops = np.asarray(stops, dtype=np.float64)
    totals = np.asarray(totals, dtype=np.float64)
    return 1.0 - stops.mean() / totals.mean()


def evaluate_paths(paths: ScorePaths, lambda_star: Optional[float], spec: RiskSpec) -> EvalReport:
    idx, stopped = stop_indices(paths, [lambda_star])
    idx, stopped = idx[:, 0], stopped[:, 0]
    stops = idx + 1
    bits = loss_bits(paths, idx[:, None], stopped[:, None], spec.loss_mode)[:, 0]
    tok = None
    if paths.tokens is not None:
        cum = np.cumsum(paths.tokens, axis=1)
        used = cum[np.arange(len(paths)), idx]
        total = cum[np.arange(len(paths)), paths.lengths - 1]
        tok = 1.0 - used.sum() / total.sum()
    return EvalReport(
        n=len(paths),
        savings_step=savings_from_stops(stops, paths.lengths),
        savings_token=tok,
        error_rate=float(bits.mean()),
        per_problem_savings=1.0 - stops / paths.lengths,
        threshold=lambda_star,
        spec=spec,
        stop_steps=stops,
        loss_bits=bits,
    )


def evaluate_set(
    slow: SlowWeights,
    probe_cfg: ProbeConfig,
    lambda_star: Optional[float],
    test_set: Sequence[Trajectory],
    spec: RiskSpec,
    mode: LabelMode,
) -> EvalReport:
    paths = compute_paths(slow, probe_cfg, test_set, spec.budget, mode)
    return evaluate_paths(paths, lambda_star, spec)


@dataclass
class SweepRow:
    delta: float
    lambda_star: Optional[float]
    savings_step: float
    savings_token: Optional[float]
    error_rate: float
    n: int


def risk_savings_sweep(
    slow: SlowWeights,
    probe_cfg: ProbeConfig,
    cal_set: Sequence[Trajectory],
    test_set: Sequence[Trajectory],
    deltas: Sequence[float],
    grid=None,
    epsilon: float = 0.05,
    mode: LabelMode = LabelMode(),
    budget: Optional[int] = None,
    loss_mode: LossMode = LossMode.EMITTED_INCORRECT,
) -> List[SweepRow]:
    """Calibrate then evaluate at each risk level; rows sorted by delta."""
    from .calibration import calibrate_paths

    specs = [RiskSpec(d, epsilon, budget, loss_mode) for d in sorted(deltas)]
    cal_paths = compute_paths(slow, probe_cfg, cal_set, budget, mode)
    test_paths = compute_paths(slow, probe_cfg, test_set, budget, mode)
    rows = []
    for spec in specs:
        res = calibrate_paths(cal_paths, grid, spec)
        rep = evaluate_paths(test_paths, res.lambda_star, spec)
        rows.append(SweepRow(spec.delta, res.lambda_star, rep.savings_step, rep.savings_token, rep.error_rate, rep.n))
    return rows


@dataclass
class TraceRecord:
    step: int
    raw: float
    smoothed: float
    stopped: bool
    first_correct: Optional[int]


def dump_trajectory_trace(
    slow: SlowWeights,
    probe_cfg: ProbeConfig,
    lambda_star: Optional[float],
    traj: Trajectory,
    mode: Optional[LabelMode] = None,
) -> Iterator[TraceRecord]:
    """Per-step records of one deployed run, for score-trajectory plots."""
    labels = None
    first = None
    if mode is not None or traj.correct is not None:
        labels = build_labels(traj, mode or LabelMode())
        hits = np.flatnonzero(labels)
        first = int(hits[0]) + 1 if hits.size else None
    out = run_with_stopping(slow, probe_cfg, lambda_star, traj, labels=labels)
    for t, (r, s) in enumerate(zip(out.raw_scores, out.smoothed_scores), start=1):
        yield TraceRecord(t, r, s, out.stopped_early and t == out.stop_step, first)
