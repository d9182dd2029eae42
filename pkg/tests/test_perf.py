import math

import numpy as np
import pytest

from perf import (
    BackupKind,
    NoCrossover,
    TimingParams,
    TokenYields,
    batch_crossover,
    choose_backup,
    critical_batch,
    critical_batch_bisection,
    crossover_agrees,
    fallback_policy,
    overhead_estimate,
    sandwich_bounds,
    simulated_crossover,
    speedup_batch,
    speedup_fast_backup,
    speedup_sd,
    speedup_slow_backup,
    speedup_ssd,
)


class TestSpeedups:
    def test_sd(self):
        assert speedup_sd(3.0, 0.5) == pytest.approx(2.0)

    def test_sd_rejects_small_yield(self):
        with pytest.raises(RuntimeError):
            speedup_sd(0.5, 0.1)

    def test_ssd_all_hit_fast_draft(self):
        # every round hits and drafting hides behind verification
        assert speedup_ssd(1.0, TokenYields(3.0, 2.0), TimingParams(0.5, 0.0)) == pytest.approx(3.0)

    def test_ssd_all_miss(self):
        assert speedup_ssd(0.0, TokenYields(3.0, 2.0), TimingParams(0.5, 0.25)) == pytest.approx(1.6)

    def test_batch_one_is_ssd(self):
        y, t = TokenYields(2.5, 1.5), TimingParams(0.4, 0.1)
        assert speedup_batch(0.7, y, t, 1) == pytest.approx(speedup_ssd(0.7, y, t))

    def test_batch_decreasing(self):
        y, t = TokenYields(2.5, 1.5), TimingParams(0.4, 0.3)
        s = [speedup_batch(0.8, y, t, b) for b in (1, 2, 4, 8, 16)]
        assert np.all(np.diff(s) < 0)

    def test_bad_p_hit(self):
        with pytest.raises(RuntimeError):
            speedup_ssd(1.5, TokenYields(2, 1), TimingParams(0.5))

    def test_ssd_at_least_sd_with_same_speculator(self):
        # primary = backup: E_hit = E_miss = E_sd, T_b = T_p = T_sd
        for p in np.linspace(0, 1, 11):
            y = TokenYields(2.2, 2.2, E_sd=2.2, T_sd=0.3)
            assert speedup_ssd(p, y, TimingParams(0.3, 0.3)) >= speedup_sd(2.2, 0.3) - 1e-12

    def test_sandwich(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            T_p = rng.uniform(0.01, 0.99)
            E_sd = rng.uniform(1, 5)
            E_hit = rng.uniform(1, 5)
            E_miss = rng.uniform(1, E_hit)
            p = rng.uniform(0, 1)
            y = TokenYields(E_hit, E_miss, E_sd=E_sd, T_sd=T_p)
            ratio = speedup_ssd(p, y, TimingParams(T_p, 0.0)) / speedup_sd(E_sd, T_p)
            lo, hi = sandwich_bounds(y, p)
            assert lo - 1e-12 <= ratio <= hi + 1e-12


class TestCriticalBatch:
    def test_closed_form_matches_bisection(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(200):
            p = rng.uniform(0.3, 0.95)
            E_hit = rng.uniform(1.5, 4)
            E_miss = rng.uniform(1, E_hit)
            y, t = TokenYields(E_hit, E_miss), TimingParams(rng.uniform(0.1, 1.5))
            try:
                b_star = critical_batch(p, y, t)
            except NoCrossover:
                continue
            assert critical_batch_bisection(p, y, t) == pytest.approx(b_star, abs=1e-9)
            checked += 1
        assert checked > 10

    def test_definition(self):
        p, y, t = 0.8, TokenYields(3.0, 1.5), TimingParams(0.5)
        b = critical_batch(p, y, t)
        assert speedup_slow_backup(p, y.E_hit, t.T_p, b) == pytest.approx(speedup_fast_backup(p, y.E_hit, y.E_miss))

    def test_no_crossover(self):
        # the fast backup is already better at b = 0
        with pytest.raises(NoCrossover):
            critical_batch(0.5, TokenYields(2.0, 2.5), TimingParams(0.5))

    def test_policy(self):
        assert choose_backup(2, 2.5) == BackupKind.SAME_PRIMARY_JIT
        assert choose_backup(3, 2.5) == BackupKind.FAST_RANDOM
        assert choose_backup(3, 3.0) == BackupKind.FAST_RANDOM

    def test_fallback_policy_without_crossover(self):
        assert fallback_policy(0.5, TokenYields(2.0, 2.5), TimingParams(0.5), 1) == BackupKind.FAST_RANDOM

    def test_crossover_at_one(self):
        p, y, t = 0.5, TokenYields(3.0, 1.8), TimingParams(0.5)
        assert critical_batch(p, y, t) == pytest.approx(1.0, abs=1e-12)
        assert speedup_slow_backup(p, 3.0, 0.5, 1) == pytest.approx(speedup_fast_backup(p, 3.0, 1.8))
        assert choose_backup(1, critical_batch(p, y, t)) == BackupKind.FAST_RANDOM

    def test_slow_backup_decreasing_in_batch(self):
        s = [speedup_slow_backup(0.8, 2.5, 0.5, b) for b in range(1, 51)]
        assert np.all(np.diff(s) < 0)
        assert s[-1] > 2.5 / 1.5

    def test_simulated_crossover(self):
        bs = [4, 1, 2]
        assert simulated_crossover(bs, [2.0, 2.4, 2.05], [2.1, 2.1, 2.1]) == 2
        assert simulated_crossover(bs, [3.0, 3.0, 3.0], [2.0, 2.0, 2.0]) is None

    def test_crossover_agrees(self):
        bs = [1, 2, 3, 4, 6, 8]
        assert crossover_agrees(bs, 3, 2.6)
        assert crossover_agrees(bs, 3, 3.9)
        assert not crossover_agrees(bs, 3, 4.1)
        assert not crossover_agrees(bs, 4, 1.5)
        assert crossover_agrees(bs, 1, 0.4)
        # coarse grid: the first point past b* may be far from it
        assert crossover_agrees(bs, 8, 6.5)
        assert crossover_agrees(bs, None, 7.5)
        assert not crossover_agrees(bs, None, 6.9)

    def test_batch_crossover_measured_curves(self):
        p, y = 0.8, TokenYields(3.0, 1.5)
        slow = (p, TokenYields(3.0, 3.0), TimingParams(0.5, 0.5))
        fast = (p, y, TimingParams(0.5, 0.0))
        b = batch_crossover(*slow, *fast)
        assert speedup_batch(*slow, b) == pytest.approx(speedup_batch(*fast, b), rel=1e-9)


class TestOverhead:
    def test_expressions(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            B, K, F, V = (int(x) for x in rng.integers(1, 64, size=4))
            c_hat = rng.uniform(0.01, 1)
            est = overhead_estimate(B, K, F, V, c_hat)
            assert est.draft_tokens_per_round == B * K * (K + 1) * F
            assert est.flop_multiplier_vs_sd == c_hat * (K + 1) * F
            assert est.cache_bits == B * F * K * (K + 1) * (V + 1) * 16

    def test_rejects_nonpositive(self):
        with pytest.raises(RuntimeError):
            overhead_estimate(0, 2, 2, 8, 0.1)


def test_slow_backup_batch_one():
    assert speedup_slow_backup(0.5, 3.0, 0.5, 1) == pytest.approx(3.0 / 1.25)
    assert math.isclose(speedup_fast_backup(0.5, 3.0, 1.0), 2.0)
