import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binom

from onlinecal.calibration import (
    ThresholdGrid, binom_tail_pvalue, calibrate, calibrate_paths, conformal_quantile, empirical_risk,
    fixed_sequence_select,
)
from onlinecal.errors import ContractError
from onlinecal.probe import ProbeConfig, SlowWeights
from onlinecal.runtime import LossMode, RiskSpec, ScorePaths
from onlinecal.synth import generate_dataset, reference_config
from onlinecal.trainer import LabelMode
from tests.conftest import make_traj


def exact_tail_fraction(n, delta, k):
    d = Fraction(delta)
    return sum(Fraction(math.comb(n, i)) * d**i * (1 - d) ** (n - i) for i in range(k + 1))


def exact_tail(n, delta, k):
    return float(exact_tail_fraction(n, delta, k))


def paths_from(rows, labels, tokens=None):
    """ScorePaths from ragged smoothed-score rows (raw set equal to smoothed)."""
    T = max(len(r) for r in rows)
    sm = np.full((len(rows), T), np.nan)
    lab = np.zeros((len(rows), T), dtype=np.int8)
    for i, (r, y) in enumerate(zip(rows, labels)):
        sm[i, : len(r)] = r
        lab[i, : len(y)] = y
    tok = None
    if tokens is not None:
        tok = np.zeros((len(rows), T), dtype=np.int64)
        for i, t in enumerate(tokens):
            tok[i, : len(t)] = t
    return ScorePaths(sm.copy(), sm, np.array([len(r) for r in rows]), lab, tok)


class TestPValue:
    def test_full_support(self):
        assert binom_tail_pvalue(10, 0.5, 10) == 1.0

    def test_half_power(self):
        assert binom_tail_pvalue(10, 0.5, 0) == pytest.approx(2.0**-10, abs=1e-15)

    def test_power_oracle(self):
        ref = float(mpmath.mpf("0.9") ** 29)
        assert binom_tail_pvalue(29, 0.1, 0) == pytest.approx(ref, abs=1e-14)
        assert round(binom_tail_pvalue(29, 0.1, 0), 5) == 0.04710

    def test_n50_k3(self):
        assert abs(binom_tail_pvalue(50, 0.1, 3) - exact_tail(50, 0.1, 3)) <= 1e-12

    @pytest.mark.parametrize("delta", [0.05, 0.1, 0.5])
    def test_exhaustive_small_n(self, delta):
        for n in range(1, 51):
            for k in range(n + 1):
                assert abs(binom_tail_pvalue(n, delta, k) - exact_tail(n, delta, k)) <= 1e-12

    def test_agrees_with_scipy(self):
        for n, d, k in [(200, 0.1, 12), (2000, 0.05, 80), (500, 0.2, 130)]:
            assert binom_tail_pvalue(n, d, k) == pytest.approx(binom.cdf(k, n, d), rel=1e-9)

    @pytest.mark.parametrize("args", [(10, 0.1, -1), (10, 0.1, 11), (0, 0.1, 0), (10, 0.0, 1), (10, 1.0, 1)])
    def test_bad_inputs(self, args):
        with pytest.raises(ContractError):
            binom_tail_pvalue(*args)

    @given(st.integers(1, 300), st.floats(0.01, 0.99), st.data())
    def test_monotone_in_k(self, n, delta, data):
        k = data.draw(st.integers(0, n - 1))
        assert binom_tail_pvalue(n, delta, k) <= binom_tail_pvalue(n, delta, k + 1)

    @given(st.integers(1, 300), st.floats(0.01, 0.99), st.data())
    def test_decreasing_in_n(self, n, delta, data):
        k = data.draw(st.integers(0, n - 1))
        hi, lo = binom_tail_pvalue(n, delta, k), binom_tail_pvalue(n + 1, delta, k)
        gap = exact_tail_fraction(n, delta, k) - exact_tail_fraction(n + 1, delta, k)
        assert lo <= hi + 1e-15
        ref = exact_tail_fraction(n, delta, k)
        if ref > 1e-300 and gap > 1e-13 * ref:  # resolvable in double precision
            assert lo < hi

    @pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1])
    def test_super_uniform(self, alpha):
        rng = np.random.default_rng(99)
        n, delta = 100, 0.1
        for r in (0.1, 0.15):
            ks = rng.binomial(n, r, size=10_000)
            p = {k: binom_tail_pvalue(n, delta, int(k)) for k in np.unique(ks)}
            frac = np.mean([p[k] <= alpha for k in ks])
            assert frac <= alpha + 3 * math.sqrt(alpha / 10_000)


class TestFixedSequence:
    def test_stop_at_first_failure(self):
        # 0-based: the third p-value is the first failure
        assert fixed_sequence_select([0.01, 0.04, 0.20, 0.01], 0.05) == 1

    def test_first_fails(self):
        assert fixed_sequence_select([0.30, 0.01], 0.05) is None

    def test_single(self):
        assert fixed_sequence_select([0.001], 0.05) == 0

    def test_empty(self):
        with pytest.raises(ContractError):
            fixed_sequence_select([], 0.05)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.001, 0.5))
    def test_prefix(self, ps, eps):
        j = fixed_sequence_select(ps, eps)
        if j is None:
            assert ps[0] > eps
        else:
            assert all(p <= eps for p in ps[: j + 1])
            assert j == len(ps) - 1 or ps[j + 1] > eps


class TestGrid:
    def test_uniform_default(self):
        g = ThresholdGrid.uniform()
        assert len(g) == 99 and g.thresholds[0] == 0.99 and g.thresholds[-1] == 0.01

    def test_must_decrease(self):
        with pytest.raises(ContractError):
            ThresholdGrid((0.2, 0.5))
        with pytest.raises(ContractError):
            ThresholdGrid(())

    def test_from_scores(self, rng):
        g = ThresholdGrid.from_scores(rng.uniform(size=500), 20)
        assert 1 <= len(g) <= 20
        assert all(a > b for a, b in zip(g.thresholds, g.thresholds[1:]))


class TestCalibrate:
    def test_zero_risk_n29_rejects_all(self):
        paths = paths_from([[0.9, 0.9]] * 29, [[1, 1]] * 29)
        grid = ThresholdGrid((0.8, 0.5, 0.2))
        res = calibrate_paths(paths, grid, RiskSpec(0.1, 0.05))
        assert all(r.rejected for r in res.records)
        assert res.lambda_star == 0.2

    def test_n10_is_too_small(self):
        paths = paths_from([[0.9]] * 10, [[1]] * 10)
        res = calibrate_paths(paths, ThresholdGrid((0.5,)), RiskSpec(0.1, 0.05))
        assert res.records[0].losses == 0
        assert res.records[0].pvalue == pytest.approx(0.9**10)
        assert res.lambda_star is None

    def test_single_risky_threshold(self):
        paths = paths_from([[0.9, 0.9]] * 100, [[0, 1]] * 100)
        res = calibrate_paths(paths, ThresholdGrid((0.5,)), RiskSpec(0.1))
        assert res.records[0].risk == 1.0 and res.lambda_star is None

    def test_records_are_a_prefix(self, rng):
        for _ in range(20):
            rows = [list(np.sort(rng.uniform(size=rng.integers(2, 9)))) for _ in range(60)]
            labels = [[int(rng.uniform() < 0.5 + 0.1 * t) for t in range(len(r))] for r in rows]
            labels = [list(np.maximum.accumulate(y)) for y in labels]
            res = calibrate_paths(paths_from(rows, labels), ThresholdGrid.uniform(25), RiskSpec(0.2))
            flags = [r.rejected for r in res.records]
            j = flags.index(False) if False in flags else len(flags)
            assert not any(flags[j:])
            assert res.lambda_star == (res.records[j - 1].lam if j else None)


def test_empirical_risk_examples():
    cfg = ProbeConfig("no_qk", 1)
    slow = SlowWeights(np.zeros(1), 0.0)
    trajs = [make_traj([[1.0]] * 3, correct=c, id=i) for i, c in enumerate([[0, 1, 1], [1, 1, 1], [0, 0, 1], [1, 1, 1]])]
    spec = RiskSpec(0.1)
    risk, bits = empirical_risk(slow, 0.99, trajs, spec, cfg, LabelMode())
    assert risk == 0.0 and bits.tolist() == [0, 0, 0, 0]
    risk, bits = empirical_risk(slow, 0.0, trajs, spec, cfg, LabelMode())
    assert bits.tolist() == [1, 0, 1, 0] and risk == 0.5


def test_loss_modes_differ_on_exhaustion():
    # never stops; final label 0 counts only under emitted_incorrect
    paths = paths_from([[0.1, 0.1]], [[0, 0]])
    a = calibrate_paths(paths, ThresholdGrid((0.5,)), RiskSpec(0.1, loss_mode=LossMode.EMITTED_INCORRECT))
    b = calibrate_paths(paths, ThresholdGrid((0.5,)), RiskSpec(0.1, loss_mode=LossMode.EARLY_STOP_ONLY))
    assert a.records[0].losses == 1 and b.records[0].losses == 0


def test_risk_monotone_on_generated_data():
    world = reference_config(seed=3)
    data = generate_dataset(world, 150)
    cfg = ProbeConfig("no_qk", world.embed_dim)
    slow = SlowWeights(np.zeros(16), -1.0)
    slow.w0[8], slow.w0[0] = 1.0, -1.0
    res = calibrate(slow, data, ThresholdGrid.uniform(), RiskSpec(0.1), cfg, LabelMode())
    risks = [r.risk for r in res.records]
    assert all(b >= a for a, b in zip(risks, risks[1:]))  # grid runs high -> low


class TestConformal:
    def test_examples(self):
        assert conformal_quantile([1, 2, 3, 4], 0.5) == 3
        assert conformal_quantile([7.0], 0.2) == 7.0
        assert conformal_quantile([i / 10 for i in range(1, 11)], 0.1) == 1.0

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            conformal_quantile([1.0], 1.0)
