#!/usr/bin/env python

"""
Cache hit-rate algebra: the unconditional hit rate of the primary/backup
switching chain, the recurrence it solves, power-law fits of miss rate
against fan-out, and hit-rate estimates from simulator run logs.
"""

from typing import List, NamedTuple, Optional, Tuple
import numpy as np
import pandas as pd
from astropy.stats import binom_conf_interval
from scipy.stats import linregress

from pdtable import pdtableclass

POWERLAW_COLUMNS = ["F", "miss_rate"]
RUN_LOG_COLUMNS = ["round", "seq", "prev_origin", "hit", "origin", "accepted", "emitted"]


class Divergent(RuntimeError):
    pass


class InsufficientData(RuntimeError):
    pass


class HitRates(NamedTuple):
    p_hit_p: float
    p_hit_b: float


class PowerLawFit(NamedTuple):
    r: float
    r_squared: float
    intercept: float


class EmpiricalHitRates(NamedTuple):
    # None when the run log has no round of that class
    p_hit_p: Optional[float]
    p_hit_b: Optional[float]
    p_hit: Optional[float]
    n_p: int
    n_b: int
    ci_p: Optional[Tuple[float, float]]
    ci_b: Optional[Tuple[float, float]]
    ci: Optional[Tuple[float, float]]

    def as_hitrates(self) -> HitRates:
        if self.p_hit_p is None or self.p_hit_b is None:
            raise InsufficientData("ERROR: run log lacks rounds after a primary or after a backup speculation")
        return HitRates(self.p_hit_p, self.p_hit_b)


def check_hitrates(h: HitRates):
    for name, val in zip(h._fields, h):
        if not 0.0 <= val <= 1.0:
            raise RuntimeError(f"ERROR: {name} must be in [0, 1], got {val}")
    if abs(h.p_hit_p - h.p_hit_b) >= 1.0:
        raise Divergent(f"ERROR: |p_hit_p - p_hit_b| must be < 1 for convergence, got {h}")


def unconditional_phit(h: HitRates) -> float:
    check_hitrates(h)
    p = h.p_hit_b / (1.0 + h.p_hit_b - h.p_hit_p)
    lo, hi = min(h), max(h)
    if not lo - 1e-12 <= p <= hi + 1e-12:
        raise RuntimeError(f"ERROR: unconditional hit rate {p} outside [{lo}, {hi}]")
    return float(p)


def phit_recurrence(h: HitRates, T: int, tol: float = 1e-12) -> np.ndarray:
    """
    Hit probability at rounds 0..T. Round 0 is speculated by the primary, so
    p(0) = p_hit_p; afterwards p(t) = p(t-1) p_hit_p + (1 - p(t-1)) p_hit_b.
    The iteration is checked against its unrolled closed form at every step.
    """
    check_hitrates(h)
    if T < 0:
        raise RuntimeError(f"ERROR: T must be >= 0, got {T}")
    ratio = h.p_hit_p - h.p_hit_b

    iterated = np.empty(T + 1)
    iterated[0] = h.p_hit_p
    for t in range(1, T + 1):
        iterated[t] = iterated[t - 1] * h.p_hit_p + (1.0 - iterated[t - 1]) * h.p_hit_b

    powers = ratio ** np.arange(T + 1, dtype=float)
    closed = h.p_hit_p * powers + h.p_hit_b * (1.0 - powers) / (1.0 - ratio)
    worst = np.max(np.abs(iterated - closed))
    if worst > tol:
        raise RuntimeError(f"ERROR: recurrence and closed form disagree by {worst:.3g}")
    return iterated


def simulate_hit_chain(h: HitRates, n: int, rng: np.random.Generator) -> pd.DataFrame:
    """Run log of n rounds from the two-state chain with known conditional hit rates."""
    origins = np.empty(n + 1, dtype=object)
    hits = np.zeros(n + 1, dtype=bool)
    origins[0] = "primary"
    u = rng.random(n)
    for t in range(1, n + 1):
        p = h.p_hit_p if origins[t - 1] == "primary" else h.p_hit_b
        hits[t] = u[t - 1] < p
        origins[t] = "primary" if hits[t] else "backup"
    prev = np.empty(n + 1, dtype=object)
    prev[0] = None
    prev[1:] = origins[:-1]
    return pd.DataFrame(
        {
            "round": np.arange(n + 1),
            "seq": 0,
            "prev_origin": prev,
            "hit": hits,
            "origin": origins,
            "accepted": np.nan,
            "emitted": np.nan,
        },
        columns=RUN_LOG_COLUMNS,
    )


def _wilson(k: int, n: int):
    if n == 0:
        return None
    lo, hi = binom_conf_interval(k, n, confidence_level=0.95, interval="wilson")
    return (float(lo), float(hi))


def empirical_hit_rates(run_log) -> EmpiricalHitRates:
    """
    Hit frequencies conditioned on the origin of the speculation that was
    verified, plus the overall frequency. Rows with no previous origin
    (round 0) are ignored.
    """
    log = pdtableclass(data=run_log.t if isinstance(run_log, pdtableclass) else run_log)
    rounds = log.ix_not_null("prev_origin")

    def rate(indices):
        n = len(indices)
        if n == 0:
            return None, 0, None
        k = int(log.t.loc[indices, "hit"].astype(bool).sum())
        return k / n, n, _wilson(k, n)

    p_p, n_p, ci_p = rate(log.ix_equal("prev_origin", "primary", indices=rounds))
    p_b, n_b, ci_b = rate(log.ix_equal("prev_origin", "backup", indices=rounds))
    p_all, _, ci_all = rate(rounds)
    return EmpiricalHitRates(p_p, p_b, p_all, n_p, n_b, ci_p, ci_b, ci_all)


def fit_powerlaw(samples: List[Tuple[float, float]]) -> PowerLawFit:
    """Least squares of log(miss_rate) on log(F); miss_rate ~ F^-r."""
    if len(samples) == 0:
        raise InsufficientData("ERROR: no samples to fit")
    F = np.array([s[0] for s in samples], dtype=float)
    miss = np.array([s[1] for s in samples], dtype=float)
    if np.any(F < 1):
        raise InsufficientData(f"ERROR: fan-out values must be >= 1, got {F}")
    if np.any(miss <= 0):
        raise InsufficientData("ERROR: miss rates must be > 0 for a log-log fit")
    if len(np.unique(F)) < 2:
        raise InsufficientData("ERROR: at least two distinct fan-out values are needed")
    res = linregress(np.log(F), np.log(miss))
    return PowerLawFit(r=float(-res.slope), r_squared=float(res.rvalue**2), intercept=float(res.intercept))


def load_powerlaw_csv(filename: str) -> List[Tuple[float, float]]:
    table = pdtableclass(columns=POWERLAW_COLUMNS)
    table.load(filename)
    return [(float(F), float(miss)) for F, miss in zip(table.t["F"], table.t["miss_rate"])]
