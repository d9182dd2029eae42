#!/usr/bin/env python

"""
Analytic speedup calculus for speculative and speculative-speculative
decoding. Times are in units of one target verification pass.
"""

import math
from enum import Enum
from typing import NamedTuple, Optional
from scipy.optimize import brentq


class NoCrossover(RuntimeError):
    pass


class BackupKind(Enum):
    SAME_PRIMARY_JIT = "same_primary_jit"
    FAST_RANDOM = "fast_random"


class TimingParams(NamedTuple):
    T_p: float
    T_b: float = 0.0


class TokenYields(NamedTuple):
    E_hit: float
    E_miss: float
    E_sd: float = 1.0
    T_sd: float = 0.0


class OverheadEstimate(NamedTuple):
    draft_tokens_per_round: int
    flop_multiplier_vs_sd: float
    cache_bits: int


def _check_p(p_hit):
    if not 0.0 <= p_hit <= 1.0:
        raise RuntimeError(f"ERROR: p_hit must be in [0, 1], got {p_hit}")


def speedup_sd(E_sd: float, T_sd: float) -> float:
    if E_sd < 1:
        raise RuntimeError(f"ERROR: E_sd must be >= 1, got {E_sd}")
    return E_sd / (1.0 + T_sd)


def expected_yield(p_hit: float, y: TokenYields) -> float:
    return p_hit * y.E_hit + (1.0 - p_hit) * y.E_miss


def speedup_ssd(p_hit: float, y: TokenYields, t: TimingParams) -> float:
    _check_p(p_hit)
    den = p_hit * max(1.0, t.T_p) + (1.0 - p_hit) * (1.0 + t.T_b)
    return expected_yield(p_hit, y) / den


def speedup_batch(p_hit: float, y: TokenYields, t: TimingParams, b: int) -> float:
    """A round only runs at the fast pace if every sequence in the batch hits."""
    _check_p(p_hit)
    if b < 1:
        raise RuntimeError(f"ERROR: batch size must be >= 1, got {b}")
    all_hit = p_hit**b
    den = all_hit * max(1.0, t.T_p) + (1.0 - all_hit) * (1.0 + t.T_b)
    return expected_yield(p_hit, y) / den


def sandwich_bounds(y: TokenYields, p_hit: float):
    """Bounds on speedup_ssd / speedup_sd, valid when T_p < 1 and T_b = 0."""
    _check_p(p_hit)
    if not y.E_hit >= y.E_miss >= 1:
        raise RuntimeError(f"ERROR: need E_hit >= E_miss >= 1, got {y}")
    upper = (1.0 + y.T_sd) * y.E_hit / y.E_sd
    return upper * p_hit, upper


def speedup_slow_backup(p_hit: float, E_hit: float, T_p: float, b: float) -> float:
    """Backup re-drafts with the primary after verification (T_b = T_p, E_miss = E_hit)."""
    return E_hit / (1.0 + T_p - T_p * p_hit**b)


def speedup_fast_backup(p_hit: float, E_hit: float, E_miss: float) -> float:
    """Backup with no latency (T_b = 0); does not depend on batch size."""
    return p_hit * E_hit + (1.0 - p_hit) * E_miss


def critical_batch(p_hit: float, y: TokenYields, t: TimingParams) -> float:
    if not t.T_p > 0:
        raise RuntimeError(f"ERROR: T_p must be > 0, got {t.T_p}")
    if not 0.0 < p_hit < 1.0:
        raise RuntimeError(f"ERROR: p_hit must be in (0, 1), got {p_hit}")
    fast = speedup_fast_backup(p_hit, y.E_hit, y.E_miss)
    arg = 1.0 + 1.0 / t.T_p - y.E_hit / (t.T_p * fast)
    if not 0.0 < arg <= 1.0:
        raise NoCrossover(
            f"ERROR: no crossover batch size (log argument {arg:.6g}); one backup dominates at every batch size"
        )
    return math.log(arg) / math.log(p_hit)


def critical_batch_bisection(p_hit: float, y: TokenYields, t: TimingParams, b_max: float = 1e6) -> float:
    fast = speedup_fast_backup(p_hit, y.E_hit, y.E_miss)

    def gap(b):
        return speedup_slow_backup(p_hit, y.E_hit, t.T_p, b) - fast

    lo, hi = gap(0.0), gap(b_max)
    if lo == 0.0:
        return 0.0
    if lo * hi > 0:
        raise NoCrossover(f"ERROR: slow and fast backup curves do not cross on [0, {b_max}]")
    return brentq(gap, 0.0, b_max, xtol=1e-13, rtol=1e-15, maxiter=500)


def batch_crossover(p_slow: float, y_slow: TokenYields, t_slow: TimingParams,
                    p_fast: float, y_fast: TokenYields, t_fast: TimingParams, b_max: float = 1024.0) -> float:
    """
    Batch size where two measured backup configurations give the same
    speedup_batch, each curve built from its own hit rate, yields and timings.
    """
    def gap(b):
        return speedup_batch(p_slow, y_slow, t_slow, b) - speedup_batch(p_fast, y_fast, t_fast, b)

    lo, hi = gap(1.0), gap(b_max)
    if lo == 0.0:
        return 1.0
    if lo * hi > 0:
        raise NoCrossover(f"ERROR: the two backup curves do not cross on [1, {b_max}]")
    return brentq(gap, 1.0, b_max, xtol=1e-12, maxiter=500)


def simulated_crossover(bs, slow, fast) -> Optional[int]:
    """Smallest batch size on the grid where the fast backup is at least as fast as the slow one."""
    return next((b for b, s, f in sorted(zip(bs, slow, fast)) if f >= s), None)


def crossover_agrees(bs, simulated: Optional[int], b_star: float, tol: float = 1.0) -> bool:
    """
    The exact curves cross at b_star, so the measured crossover should be the
    first grid point at or past it: simulated >= b_star - tol, and the grid
    point before it (or the whole grid when nothing crossed) < b_star + tol.
    """
    bs = sorted(bs)
    if simulated is None:
        return bs[-1] < b_star + tol
    if simulated < b_star - tol:
        return False
    i = bs.index(simulated)
    return i == 0 or bs[i - 1] < b_star + tol


def choose_backup(b: int, b_star: float) -> BackupKind:
    if b < math.ceil(b_star):
        return BackupKind.SAME_PRIMARY_JIT
    return BackupKind.FAST_RANDOM


def fallback_policy(p_hit: float, y: TokenYields, t: TimingParams, b: int) -> BackupKind:
    try:
        return choose_backup(b, critical_batch(p_hit, y, t))
    except NoCrossover:
        slow = speedup_slow_backup(p_hit, y.E_hit, t.T_p, 1)
        fast = speedup_fast_backup(p_hit, y.E_hit, y.E_miss)
        return BackupKind.SAME_PRIMARY_JIT if slow >= fast else BackupKind.FAST_RANDOM


def overhead_estimate(B: int, K: int, F: int, V: int, c_hat: float, width: int = 16) -> OverheadEstimate:
    """
    Per-round cost of keeping a speculation cache for a batch of B sequences
    with lookahead K and F candidates per position: draft tokens decoded, draft
    FLOPs relative to plain speculative decoding, and cache size in bits at
    `width` bits per stored number.
    """
    for name, val in (("B", B), ("K", K), ("F", F), ("V", V), ("c_hat", c_hat), ("width", width)):
        if not val > 0:
            raise RuntimeError(f"ERROR: {name} must be positive, got {val}")
    return OverheadEstimate(
        draft_tokens_per_round=B * K * (K + 1) * F,
        flop_multiplier_vs_sd=c_hat * (K + 1) * F,
        cache_bits=B * F * K * (K + 1) * (V + 1) * width,
    )
