import numpy as np
import pytest

import specdec
from cache import FanOutPlan, exhaustive_fanout, geometric_fanout, uniform_fanout
from conftest import mixed_pair
from hitmodel import RUN_LOG_COLUMNS, empirical_hit_rates
from perf import (
    BackupKind,
    TimingParams,
    TokenYields,
    critical_batch,
    crossover_agrees,
    sandwich_bounds,
    simulated_crossover,
    speedup_batch,
    speedup_ssd,
)
from sim import (
    SimConfig,
    VirtualClock,
    run_ar,
    run_sd,
    run_ssd,
    run_ssd_batch,
    transition_counts,
    two_sample_lossless_test,
)
from specdec import Origin


def ssd_config(pair, K=3, budget=8, **kwargs):
    V = pair.target.V
    args = dict(
        pair=pair,
        K=K,
        plan_primary=uniform_fanout(K, budget, role=Origin.PRIMARY, V=V),
        plan_backup=uniform_fanout(K, budget, role=Origin.BACKUP, V=V),
    )
    args.update(kwargs)
    return SimConfig(**args)


class TestVirtualClock:
    def test_advance(self):
        clock = VirtualClock()
        clock.advance(1.5)
        clock.advance_to(2.0)
        assert clock.now == 2.0

    def test_no_going_back(self):
        clock = VirtualClock(3.0)
        with pytest.raises(RuntimeError):
            clock.advance_to(2.0)
        with pytest.raises(RuntimeError):
            clock.advance(-0.1)


class TestRunAR:
    def test_counts(self, small_pair):
        stats = run_ar(small_pair.target, [0], 500, seed=1, batch_size=3)
        assert stats.tokens_emitted == 1500
        assert stats.virtual_time == 500.0
        assert stats.speedup == pytest.approx(1.0)
        assert [len(s) for s in stats.streams] == [500] * 3

    def test_deterministic(self, small_pair):
        assert run_ar(small_pair.target, [0], 200, seed=5) == run_ar(small_pair.target, [0], 200, seed=5)
        assert run_ar(small_pair.target, [0], 200, seed=5).streams != run_ar(small_pair.target, [0], 200, seed=6).streams


class TestRunSD:
    def test_round_cost(self, small_pair):
        stats = run_sd(SimConfig(small_pair, K=3, rounds=400, timing=TimingParams(0.4)))
        assert stats.virtual_time == pytest.approx(400 * 1.4)
        assert 400 <= stats.tokens_emitted <= 1600
        assert stats.hit_rate is None

    def test_max_tokens(self, small_pair):
        stats = run_sd(SimConfig(small_pair, K=3, rounds=10000, max_tokens=100))
        assert 100 <= len(stats.streams[0]) < 104
        assert stats.rounds < 10000

    @pytest.mark.slow
    def test_mean_emitted_matches_expected_tokens(self):
        # context-free pair: every drafted token is accepted with the same probability
        pair = mixed_pair(8, 0, 0.4, seed=5)
        stats = run_sd(SimConfig(pair, K=3, rounds=50000, seed=9, record_log=True))
        emitted = stats.log["emitted"].to_numpy(dtype=float)
        expected = specdec.expected_tokens(pair.nominal_alpha, 3)
        assert stats.mean_emitted == pytest.approx(emitted.mean())
        assert abs(emitted.mean() - expected) < 3 * emitted.std() / np.sqrt(len(emitted))


class TestRunSSD:
    def test_needs_plans(self, small_pair):
        with pytest.raises(RuntimeError):
            run_ssd(SimConfig(small_pair))

    def test_deterministic(self, small_pair):
        cfg = ssd_config(small_pair, rounds=300, seed=3)
        assert run_ssd(cfg) == run_ssd(cfg)

    def test_exhaustive_cache_always_hits(self, small_pair):
        T_p = 0.4
        cfg = SimConfig(small_pair, K=2, rounds=200, timing=TimingParams(T_p),
                        plan_primary=exhaustive_fanout(2, 6), plan_backup=exhaustive_fanout(2, 6, role=Origin.BACKUP))
        stats = run_ssd(cfg)
        assert stats.hit_rate == 1.0
        assert stats.lookups == 199
        assert stats.all_hit_rounds == 199
        assert stats.virtual_time == pytest.approx(T_p + 1.0 + 199 * 1.0)

    def test_miss_round_cost(self, small_pair):
        # a single candidate per position keeps the hit rate well below one
        cfg = ssd_config(small_pair, K=2, budget=3, rounds=500, timing=TimingParams(0.5, 0.25))
        stats = run_ssd(cfg)
        misses = stats.lookups - stats.hits
        expected = 0.5 + 1.0 + stats.all_hit_rounds * 1.0 + misses * 1.25
        assert stats.virtual_time == pytest.approx(expected)

    def test_token_accounting(self, small_pair):
        cfg = ssd_config(small_pair, rounds=500, record_log=True)
        stats = run_ssd(cfg)
        first = int(stats.log.loc[stats.log["round"] == 0, "emitted"].sum())
        assert stats.hit_tokens + stats.miss_tokens + first == stats.tokens_emitted
        assert sum(len(s) for s in stats.streams) == stats.tokens_emitted

    def test_run_log_matches_counters(self, small_pair):
        stats = run_ssd(ssd_config(small_pair, rounds=800, record_log=True, batch_size=2))
        assert list(stats.log.columns) == RUN_LOG_COLUMNS
        rates = empirical_hit_rates(stats.log)
        assert rates.n_p == stats.lookups_p and rates.n_b == stats.lookups_b
        if rates.p_hit_p is not None:
            assert rates.p_hit_p == pytest.approx(stats.hit_rate_p)

    def test_max_tokens(self, small_pair):
        stats = run_ssd(ssd_config(small_pair, rounds=10000, max_tokens=200))
        assert 200 <= len(stats.streams[0]) < 204

    def test_batch(self, small_pair):
        stats = run_ssd_batch(ssd_config(small_pair, rounds=300, batch_size=4))
        assert len(stats.streams) == 4
        assert stats.verifications == 1200
        assert stats.all_hit_rounds <= stats.hits

    def test_jit_backup_is_slower_per_miss(self, small_pair):
        cfg = ssd_config(small_pair, rounds=300, backup_kind=BackupKind.SAME_PRIMARY_JIT, timing=TimingParams(0.6, 0.0))
        assert cfg.backup_time == 0.6

    def test_plan_role_check(self, small_pair):
        cfg = ssd_config(small_pair, plan_backup=FanOutPlan([2, 2, 2, 2], role=Origin.PRIMARY))
        with pytest.raises(RuntimeError):
            run_ssd(cfg)


@pytest.mark.slow
class TestSpeedupFormula:
    @pytest.mark.parametrize(
        "T_p,T_b,budget,kind",
        [
            (0.5, 0.0, 8, BackupKind.FAST_RANDOM),
            (0.3, 0.1, 4, BackupKind.FAST_RANDOM),
            (0.8, 0.0, 12, BackupKind.FAST_RANDOM),
            (0.5, 0.0, 8, BackupKind.SAME_PRIMARY_JIT),
            (1.5, 0.2, 8, BackupKind.FAST_RANDOM),
        ],
    )
    def test_simulation_matches_formula(self, medium_pair, T_p, T_b, budget, kind):
        cfg = ssd_config(medium_pair, budget=budget, rounds=100000, timing=TimingParams(T_p, T_b),
                         backup_kind=kind, seed=7)
        stats = run_ssd(cfg)
        analytic = speedup_ssd(stats.hit_rate, stats.yields(), TimingParams(T_p, cfg.backup_time))
        assert abs(stats.speedup - analytic) / analytic < 0.01

    def test_batch_formula(self, medium_pair):
        cfg = ssd_config(medium_pair, rounds=50000, batch_size=4, seed=8)
        stats = run_ssd(cfg)
        analytic = speedup_batch(stats.hit_rate, stats.yields(), TimingParams(0.5, 0.0), 4)
        assert abs(stats.tokens_per_vtime / 4 - analytic) / analytic < 0.02

    def test_ssd_beats_sd_with_same_speculator(self, medium_pair):
        gains = []
        for seed in range(20):
            timing = TimingParams(0.3, 0.3)
            sd = run_sd(SimConfig(medium_pair, K=3, rounds=2000, timing=timing, seed=seed))
            ssd = run_ssd(ssd_config(medium_pair, rounds=2000, timing=timing, seed=seed,
                                     backup_kind=BackupKind.SAME_PRIMARY_JIT))
            assert ssd.hit_rate > 0
            gains.append(ssd.tokens_per_vtime - sd.tokens_per_vtime)
        assert np.mean(gains) > 0

    @pytest.mark.parametrize("T_p,K,budget", [(0.2, 2, 6), (0.4, 3, 8), (0.5, 3, 12), (0.7, 2, 8), (0.9, 4, 16)])
    def test_sandwich_holds_in_simulation(self, medium_pair, T_p, K, budget):
        timing = TimingParams(T_p, 0.0)
        sd = run_sd(SimConfig(medium_pair, K=K, rounds=20000, timing=timing, seed=3))
        ssd = run_ssd(ssd_config(medium_pair, K=K, budget=budget, rounds=20000, timing=timing, seed=4,
                                 backup_kind=BackupKind.FAST_RANDOM))
        ratio = ssd.tokens_per_vtime / sd.tokens_per_vtime
        lo, hi = sandwich_bounds(TokenYields(ssd.E_hit, ssd.E_miss, E_sd=sd.mean_emitted, T_sd=T_p), ssd.hit_rate)
        assert 0.99 * lo <= ratio <= 1.01 * hi


@pytest.mark.slow
class TestBatchCrossover:
    @pytest.mark.parametrize("T_p", [0.4, 0.5, 0.7])
    def test_measured_crossover_near_critical_batch(self, medium_pair, T_p):
        bs = [1, 2, 3, 4, 6, 8]
        runs = {}
        for kind in (BackupKind.SAME_PRIMARY_JIT, BackupKind.FAST_RANDOM):
            runs[kind] = [run_ssd(ssd_config(medium_pair, rounds=10000, batch_size=b, backup_kind=kind,
                                             timing=TimingParams(T_p, 0.0), seed=13)) for b in bs]
        fast_one = runs[BackupKind.FAST_RANDOM][0]
        b_star = critical_batch(fast_one.hit_rate, fast_one.yields(), TimingParams(T_p))
        simulated = simulated_crossover(bs, [s.speedup for s in runs[BackupKind.SAME_PRIMARY_JIT]],
                                        [s.speedup for s in runs[BackupKind.FAST_RANDOM]])
        assert crossover_agrees(bs, simulated, b_star)


class TestLosslessTest:
    def test_transition_counts(self, small_pair):
        counts = transition_counts([[0, 1, 2, 1, 2]], small_pair.target)
        assert counts.sum() == 4
        assert counts[1, 2] == 2

    def test_same_source_passes(self, small_pair):
        a = run_ar(small_pair.target, [0], 20000, seed=1)
        b = run_ar(small_pair.target, [0], 20000, seed=2)
        assert two_sample_lossless_test(a.streams, b.streams, small_pair.target).passed

    @pytest.mark.parametrize("mode", ["sd", "ssd"])
    def test_speculative_streams_match_autoregressive(self, small_pair, mode):
        N = 20000
        cfg = ssd_config(small_pair, K=2, budget=6, rounds=N, max_tokens=N, seed=5)
        spec = run_sd(cfg) if mode == "sd" else run_ssd(cfg)
        ar = run_ar(small_pair.target, [0], N, seed=6)
        result = two_sample_lossless_test(ar.streams, [s[:N] for s in spec.streams], small_pair.target)
        assert result.passed
        assert result.tv_distance < 0.05

    def test_target_vs_draft_fails(self):
        pair = mixed_pair(8, 1, 0.9, seed=5)
        a = run_ar(pair.target, [0], 20000, seed=1)
        b = run_ar(pair.draft, [0], 20000, seed=2)
        assert not two_sample_lossless_test(a.streams, b.streams, pair.target).passed

    def test_corrupted_acceptance_fails(self, monkeypatch):
        pair = mixed_pair(8, 1, 0.9, seed=5)
        monkeypatch.setattr(specdec, "accept_probability", lambda p_t, p_d: 1.0)
        cfg = ssd_config(pair, K=3, rounds=20000, max_tokens=20000, seed=3)
        ssd = run_ssd(cfg)
        ar = run_ar(pair.target, [0], 20000, seed=4)
        assert not two_sample_lossless_test(ar.streams, [s[:20000] for s in ssd.streams], pair.target).passed

    @pytest.mark.slow
    def test_ssd_is_lossless_end_to_end(self):
        pair = mixed_pair(32, 1, 0.3, seed=21)
        N = 200000
        cfg = SimConfig(pair, K=4, rounds=N, max_tokens=N, seed=1, backup_kind=BackupKind.FAST_RANDOM,
                        plan_primary=geometric_fanout(0.7, 1.0, 4, 12, role=Origin.PRIMARY, V=32),
                        plan_backup=geometric_fanout(0.1, 1.0, 4, 12, role=Origin.BACKUP, V=32))
        ssd = run_ssd(cfg)
        ar = run_ar(pair.target, [0], N, seed=2)
        result = two_sample_lossless_test(ar.streams, [s[:N] for s in ssd.streams], pair.target,
                                          significance=0.001)
        assert result.passed
