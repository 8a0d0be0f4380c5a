"""Desk-scale evaluation studies on the synthetic world.

Three studies back the statistical claims of the package:

* ``guarantee_monte_carlo``: repeated calibrate/test draws with a fixed probe,
  counting how often the test risk exceeds the target.
* ``seed_study``: train the adaptive and static probes for one seed, then
  calibrate and evaluate both at several risk levels on an in-distribution and
  a shifted test set.
* ``summarize_diagonal`` / ``summarize_comparison`` aggregate seed studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import calibrate_paths
from .probe import ProbeConfig, SlowWeights, Variant
from .runtime import RiskSpec, compute_paths, evaluate_paths
from .synth import SynthConfig, generate_dataset, reference_config, with_ood_shift
from .trainer import LabelMode, TrainConfig, train, train_static

DELTAS = (0.05, 0.1, 0.15, 0.2)


@dataclass(frozen=True)
class StudyConfig:
    """Sizes and optimiser settings shared by every seed of a study."""

    n_train: int = 400
    n_cal: int = 500
    n_test: int = 1000
    batch: int = 4
    epochs: int = 30
    epsilon: float = 0.05
    deltas: Tuple[float, ...] = DELTAS


@dataclass
class Cell:
    savings: float
    error: float
    lambda_star: Optional[float]


@dataclass
class SeedResult:
    seed: int
    # probe name -> test split ("in" / "shifted") -> delta -> Cell
    cells: Dict[str, Dict[str, Dict[float, Cell]]] = field(default_factory=dict)


@dataclass
class MonteCarloResult:
    risks: np.ndarray
    delta: float

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self.risks > self.delta))


def train_probes(world: SynthConfig, seed: int, study: StudyConfig) -> Dict[str, SlowWeights]:
    """Meta-trained adaptive probe and the static baseline on the same training draw."""
    data = generate_dataset(replace(world, seed=seed), study.n_train)
    cfg = ProbeConfig(Variant.NO_QK, world.embed_dim)
    tc = TrainConfig(seed=seed, batch=study.batch, epochs=study.epochs)
    ttt, _, _ = train(data, cfg, tc, LabelMode())
    return {"ttt": ttt, "static": train_static(data, cfg, tc, LabelMode())}


def seed_study(seed: int, world: Optional[SynthConfig] = None, study: StudyConfig = StudyConfig()) -> SeedResult:
    world = world or reference_config()
    world = replace(world, seed=seed)
    probes = train_probes(world, seed, study)
    cfg = ProbeConfig(Variant.NO_QK, world.embed_dim)
    mode = LabelMode()
    start = study.n_train
    cal = generate_dataset(world, study.n_cal, start)
    start += study.n_cal
    tests = {
        "in": generate_dataset(world, study.n_test, start),
        "shifted": generate_dataset(with_ood_shift(world), study.n_test, start),
    }
    out = SeedResult(seed)
    for name, slow in probes.items():
        cal_paths = compute_paths(slow, cfg, cal, mode=mode)
        test_paths = {k: compute_paths(slow, cfg, v, mode=mode) for k, v in tests.items()}
        by_split: Dict[str, Dict[float, Cell]] = {k: {} for k in tests}
        for delta in study.deltas:
            spec = RiskSpec(delta, study.epsilon)
            lam = calibrate_paths(cal_paths, None, spec).lambda_star
            for k, paths in test_paths.items():
                rep = evaluate_paths(paths, lam, spec)
                by_split[k][delta] = Cell(rep.savings_step, rep.error_rate, lam)
        out.cells[name] = by_split
    return out


def summarize_diagonal(results: Sequence[SeedResult], split: str = "in") -> Dict[str, Dict[float, float]]:
    """Mean empirical error per probe and risk level."""
    names = results[0].cells.keys()
    deltas = results[0].cells["ttt"][split].keys()
    return {
        n: {d: float(np.mean([r.cells[n][split][d].error for r in results])) for d in deltas} for n in names
    }


@dataclass
class Comparison:
    ttt_savings: np.ndarray
    static_savings: np.ndarray
    ttt_errors: np.ndarray

    @property
    def wins(self) -> int:
        return int(np.sum(self.ttt_savings > self.static_savings))

    @property
    def pooled(self) -> Tuple[float, float]:
        return float(self.ttt_savings.mean()), float(self.static_savings.mean())


def summarize_comparison(results: Sequence[SeedResult], delta: float = 0.1, split: str = "shifted") -> Comparison:
    return Comparison(
        np.array([r.cells["ttt"][split][delta].savings for r in results]),
        np.array([r.cells["static"][split][delta].savings for r in results]),
        np.array([r.cells["ttt"][split][delta].error for r in results]),
    )


def guarantee_monte_carlo(
    slow: SlowWeights,
    cfg: ProbeConfig,
    world: SynthConfig,
    draws: int = 500,
    n_cal: int = 200,
    n_test: int = 2000,
    delta: float = 0.1,
    epsilon: float = 0.05,
    first_index: int = 0,
) -> MonteCarloResult:
    """Test risk of the calibrated rule over independent calibration/test draws.

    Draw ``m`` uses trajectory indices ``first_index + m * (n_cal + n_test)``
    onward, so draws never overlap each other or anything below ``first_index``.
    """
    spec = RiskSpec(delta, epsilon)
    mode = LabelMode()
    risks = np.empty(draws)
    block = n_cal + n_test
    for m in range(draws):
        start = first_index + m * block
        cal = generate_dataset(world, n_cal, start)
        test = generate_dataset(world, n_test, start + n_cal)
        lam = calibrate_paths(compute_paths(slow, cfg, cal, mode=mode), None, spec).lambda_star
        risks[m] = evaluate_paths(compute_paths(slow, cfg, test, mode=mode), lam, spec).error_rate
    return MonteCarloResult(risks, delta)
