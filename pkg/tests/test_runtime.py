from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from onlinecal.calibration import ThresholdGrid
from onlinecal.errors import ContractError
from onlinecal.probe import FastState, ProbeConfig, SlowWeights, advance, init_slow_weights, window_mean
from onlinecal.runtime import (
    LossMode, RiskSpec, compute_paths, dump_trajectory_trace, evaluate_paths, evaluate_set, risk_savings_sweep,
    run_with_stopping, savings_from_stops, stop_indices,
)
from onlinecal.synth import generate_dataset, reference_config
from onlinecal.trainer import LabelMode, build_labels
from tests.conftest import make_traj


def zero_probe(d=1, eta=0.01):
    return SlowWeights(np.zeros(d), 0.0, eta=eta), ProbeConfig("no_qk", d)


@pytest.fixture(scope="module")
def world_data():
    world = reference_config(seed=5)
    return world, generate_dataset(world, 120)


def trained_like(rng, variant, d=16):
    cfg = ProbeConfig(variant, d, None if variant == "no_qk" else 6)
    slow = init_slow_weights(cfg, rng, eta=0.05)
    slow.w0 = rng.normal(scale=0.5, size=cfg.weight_dim)
    slow.b0 = -0.5
    return slow, cfg


class TestRunWithStopping:
    def test_never_stop(self):
        slow, cfg = zero_probe()
        out = run_with_stopping(slow, cfg, None, make_traj([[1.0]] * 7))
        assert out.stop_step == 7 and not out.stopped_early
        out = run_with_stopping(slow, cfg, None, make_traj([[1.0]] * 7), budget=4)
        assert out.stop_step == 4

    def test_first_step_stop_without_update(self, monkeypatch):
        import onlinecal.runtime as rt
        slow, cfg = zero_probe()
        calls = []
        real = rt.advance

        def spy(fast, *a):
            calls.append(fast)
            return real(fast, *a)

        monkeypatch.setattr(rt, "advance", spy)
        out = run_with_stopping(slow, cfg, 0.4, make_traj([[1.0]] * 5))
        assert out.stop_step == 1 and out.stopped_early
        assert out.raw_scores == [0.5] and out.smoothed_scores == [0.5]
        assert len(calls) == 1 and calls[0].step == 0  # the discarded update never feeds a score

    def test_identical_inputs(self):
        slow, cfg = zero_probe()
        tr = make_traj([[1.0]] * 12)
        assert run_with_stopping(slow, cfg, 0.499, tr).stop_step == 1
        out = run_with_stopping(slow, cfg, 0.501, tr)
        assert out.stop_step == 12 and not out.stopped_early
        assert all(b < a for a, b in zip(out.raw_scores, out.raw_scores[1:]))

    def test_dimension_mismatch(self):
        slow, cfg = zero_probe(2)
        with pytest.raises(ContractError):
            run_with_stopping(slow, cfg, 0.5, make_traj([[1.0, 2.0, 3.0]]))

    def test_minimality_and_outcome_invariants(self, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, "no_qk")
        for lam in (0.3, 0.5, 0.7):
            for tr in data[:30]:
                out = run_with_stopping(slow, cfg, lam, tr)
                if out.stopped_early:
                    assert out.smoothed_scores[-1] >= lam
                assert all(s < lam for s in out.smoothed_scores[:-1])
                assert out.step_savings == 1 - out.stop_step / len(tr)

    def test_reset_between_instances(self, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, "qk")
        a1 = run_with_stopping(slow, cfg, 0.6, data[0])
        b1 = run_with_stopping(slow, cfg, 0.6, data[1])
        b2 = run_with_stopping(slow, cfg, 0.6, data[1])
        a2 = run_with_stopping(slow, cfg, 0.6, data[0])
        assert a1.raw_scores == a2.raw_scores and b1.raw_scores == b2.raw_scores

    def test_static_ignores_labels(self, world_data):
        _, data = world_data
        slow = SlowWeights(np.full(16, 0.1), -0.3, eta=0.0)
        cfg = ProbeConfig("no_qk", 16)
        tr = data[0]
        labels = build_labels(tr, LabelMode())
        f0, f1 = FastState.fresh(slow), FastState.fresh(slow)
        for phi, y in zip(tr.embeddings, labels):
            r0, _, f0 = advance(f0, slow, cfg, phi, 0)
            r1, _, f1 = advance(f1, slow, cfg, phi, int(y))
            assert r0 == r1

    def test_token_savings_counts_stop_step(self):
        slow, cfg = zero_probe()
        tr = make_traj([[1.0]] * 3, tokens=[10, 20, 30])
        out = run_with_stopping(slow, cfg, 0.4, tr)
        assert out.token_savings == pytest.approx(1 - 10 / 60)


class TestFastPath:
    @pytest.mark.parametrize("variant", ["no_qk", "qk", "shared_qk"])
    def test_matches_literal_loop(self, variant, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, variant)
        sub = data[:40]
        paths = compute_paths(slow, cfg, sub, budget=30, mode=LabelMode())
        lams = [0.2, 0.45, 0.6, 0.8, None]
        idx, stopped = stop_indices(paths, lams)
        for i, tr in enumerate(sub):
            for j, lam in enumerate(lams):
                out = run_with_stopping(slow, cfg, lam, tr, budget=30)
                assert out.stop_step == idx[i, j] + 1
                assert out.stopped_early == stopped[i, j]
                assert out.raw_scores == list(paths.raw[i, : out.stop_step])
                assert out.smoothed_scores == list(paths.smoothed[i, : out.stop_step])

    def test_threads_do_not_change_results(self, world_data, rng, monkeypatch):
        import onlinecal.runtime as rt
        monkeypatch.setattr(rt, "CHUNK", 16)
        _, data = world_data
        slow, cfg = trained_like(rng, "qk")
        one = compute_paths(slow, cfg, data, mode=LabelMode())
        with ThreadPoolExecutor(4) as ex:
            many = compute_paths(slow, cfg, data, mode=LabelMode(), executor=ex)
        assert np.array_equal(one.raw, many.raw, equal_nan=True)
        assert np.array_equal(one.smoothed, many.smoothed, equal_nan=True)

    def test_smoothed_recomputes_from_raw(self, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, "no_qk")
        p = compute_paths(slow, cfg, data[:10])
        for i in range(10):
            row = list(p.raw[i, : p.lengths[i]])
            for t in range(len(row)):
                assert p.smoothed[i, t] == window_mean(row[: t + 1], cfg.smoothing_window)


class TestMetrics:
    def test_ratio_of_means(self):
        assert savings_from_stops([3, 8, 10], [10, 10, 20]) == pytest.approx(0.475, abs=1e-15)

    def test_budget_runs_save_nothing(self, world_data):
        _, data = world_data
        slow, cfg = zero_probe(16)
        rep = evaluate_set(slow, cfg, None, data[:20], RiskSpec(0.1), LabelMode())
        assert rep.savings_step == 0.0 and rep.savings_token == 0.0

    def test_error_rate_is_mean_of_bits(self):
        slow, cfg = zero_probe()
        trajs = [make_traj([[1.0]] * 2, correct=c, id=i) for i, c in enumerate([[1, 1], [1, 1], [0, 1], [0, 0]])]
        rep = evaluate_set(slow, cfg, 0.4, trajs, RiskSpec(0.1), LabelMode())
        assert rep.loss_bits.tolist() == [0, 0, 1, 1] and rep.error_rate == 0.5

    def test_savings_bounds_and_oracle(self, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, "no_qk")
        paths = compute_paths(slow, cfg, data, mode=LabelMode())
        oracle_stops = np.array([np.flatnonzero(np.r_[y, 1])[0] + 1 for y in
                                 (build_labels(t, LabelMode()) for t in data)])
        oracle_stops = np.minimum(oracle_stops, paths.lengths)
        oracle = savings_from_stops(oracle_stops, paths.lengths)
        for lam in np.linspace(0.05, 0.95, 19):
            rep = evaluate_paths(paths, lam, RiskSpec(0.1))
            assert 0 <= rep.savings_step <= 1 - 1 / paths.lengths.mean()
            if rep.error_rate == 0:
                assert rep.savings_step <= oracle + 1e-12


class TestSweep:
    def test_rows_and_monotone_threshold(self, world_data, rng):
        world, data = world_data
        slow, cfg = trained_like(rng, "no_qk")
        rows = risk_savings_sweep(slow, cfg, data[:80], data[80:], [0.2, 0.05, 0.15, 0.1])
        assert [r.delta for r in rows] == [0.05, 0.1, 0.15, 0.2]
        lams = [1.0 if r.lambda_star is None else r.lambda_star for r in rows]
        assert all(b <= a for a, b in zip(lams, lams[1:]))

    @pytest.mark.parametrize("delta", [1.0, 1.5, 0.0])
    def test_bad_delta(self, delta):
        with pytest.raises(ContractError):
            RiskSpec(delta)


class TestTrace:
    def test_trace_matches_run(self, world_data, rng):
        _, data = world_data
        slow, cfg = trained_like(rng, "no_qk")
        for tr in data[:15]:
            out = run_with_stopping(slow, cfg, 0.55, tr)
            recs = list(dump_trajectory_trace(slow, cfg, 0.55, tr, LabelMode()))
            assert len(recs) == out.stop_step
            assert [r.stopped for r in recs[:-1]] == [False] * (len(recs) - 1)
            assert recs[-1].stopped == out.stopped_early
            raws = [r.raw for r in recs]
            assert all(r.smoothed == window_mean(raws[: i + 1], 10) for i, r in enumerate(recs))

    def test_first_correct_marker(self):
        slow, cfg = zero_probe()
        recs = list(dump_trajectory_trace(slow, cfg, None, make_traj([[1.0]] * 4, correct=[0, 0, 1, 1])))
        assert {r.first_correct for r in recs} == {3}
        recs = list(dump_trajectory_trace(slow, cfg, None, make_traj([[1.0]] * 4, correct=[0] * 4)))
        assert {r.first_correct for r in recs} == {None}
