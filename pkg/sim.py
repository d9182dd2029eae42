#!/usr/bin/env python

"""
Virtual-clock Monte-Carlo simulator of autoregressive, speculative and
speculative-speculative decoding rounds over synthetic language models.

Time is measured in units of one target verification pass. A speculative
round costs 1 + T_p; a speculative-speculative round costs max(1, T_p) when
every sequence in the batch found its outcome in the cache and 1 + T_b
otherwise. The first SSD round drafts synchronously and costs T_p + 1.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence
import numpy as np
import pandas as pd
from scipy.stats import chi2

from cache import FanOutPlan, build_cache
from dist import SamplingScheme, Standard, sample_from_cdf
from experiment import print_progress_bar
from hitmodel import RUN_LOG_COLUMNS
from lm import LMPair, SyntheticLM
from perf import BackupKind, TimingParams, TokenYields
from specdec import Origin, Speculation, draft, draft_uniform, verify

STREAM_NAMES = ("target", "draft", "cache", "backup")


class VirtualClock:
    def __init__(self, start_time: float = 0.0):
        self._now = float(start_time)

    @property
    def now(self) -> float:
        return self._now

    def advance(self, delta: float):
        if delta < 0:
            raise RuntimeError(f"ERROR: cannot advance the clock by a negative delta {delta}")
        self._now += delta

    def advance_to(self, time: float):
        if time < self._now:
            raise RuntimeError(f"ERROR: cannot move the clock backwards from {self._now} to {time}")
        self._now = float(time)


def sequence_streams(seed, n_sequences: int) -> List[Dict[str, np.random.Generator]]:
    """Independent target/draft/cache/backup generators for every sequence in a batch."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    out = []
    for child in root.spawn(n_sequences):
        out.append({name: np.random.default_rng(s) for name, s in zip(STREAM_NAMES, child.spawn(len(STREAM_NAMES)))})
    return out


@dataclass
class SimConfig:
    pair: LMPair
    K: int = 3
    scheme: SamplingScheme = Standard()
    plan_primary: Optional[FanOutPlan] = None
    plan_backup: Optional[FanOutPlan] = None
    timing: TimingParams = TimingParams(0.5, 0.0)
    backup_kind: BackupKind = BackupKind.FAST_RANDOM
    batch_size: int = 1
    rounds: int = 1000
    seed: int = 0
    max_tokens: Optional[int] = None
    lazy_cache: bool = True
    record_log: bool = False
    prompt: Optional[Sequence[int]] = None

    def validate(self, needs_plans=False):
        if self.rounds < 1:
            raise RuntimeError(f"ERROR: rounds must be >= 1, got {self.rounds}")
        if self.batch_size < 1:
            raise RuntimeError(f"ERROR: batch size must be >= 1, got {self.batch_size}")
        if self.K < 1:
            raise RuntimeError(f"ERROR: lookahead K must be >= 1, got {self.K}")
        self.scheme.validate(self.pair.target.V)
        if needs_plans:
            for role, plan in ((Origin.PRIMARY, self.plan_primary), (Origin.BACKUP, self.plan_backup)):
                if plan is None:
                    raise RuntimeError(f"ERROR: no {role.value} fan-out plan configured")
                if plan.role != role:
                    raise RuntimeError(f"ERROR: {plan.role.value} plan configured for the {role.value} role")
                if plan.K != self.K:
                    raise RuntimeError(f"ERROR: {role.value} plan covers K={plan.K}, not K={self.K}")
                plan.check_vocab(self.pair.target.V)

    def plan_for(self, origin: Origin) -> FanOutPlan:
        return self.plan_primary if origin == Origin.PRIMARY else self.plan_backup

    @property
    def backup_time(self) -> float:
        # a just-in-time primary redraft takes as long as the primary
        if self.backup_kind == BackupKind.SAME_PRIMARY_JIT:
            return self.timing.T_p
        return self.timing.T_b

    def start_context(self) -> List[int]:
        m = self.pair.target.m
        if self.prompt is None:
            return [0] * m
        if len(self.prompt) < m:
            raise RuntimeError(f"ERROR: prompt {self.prompt} shorter than the model order {m}")
        return list(self.prompt)


@dataclass
class RunStats:
    mode: str
    batch_size: int = 1
    rounds: int = 0
    tokens_emitted: int = 0
    virtual_time: float = 0.0
    accepted_total: int = 0
    verifications: int = 0
    # lookups and hits keyed by the origin of the speculation that was verified
    lookups_p: int = 0
    hits_p: int = 0
    lookups_b: int = 0
    hits_b: int = 0
    hit_tokens: int = 0
    miss_tokens: int = 0
    all_hit_rounds: int = 0
    streams: List[List[int]] = field(default_factory=list)
    log: Optional[pd.DataFrame] = None

    @property
    def lookups(self):
        return self.lookups_p + self.lookups_b

    @property
    def hits(self):
        return self.hits_p + self.hits_b

    @property
    def tokens_per_vtime(self):
        return self.tokens_emitted / self.virtual_time

    @property
    def speedup(self):
        """Tokens per unit time per sequence; autoregressive decoding scores 1."""
        return self.tokens_per_vtime / self.batch_size

    @property
    def hit_rate(self):
        return self.hits / self.lookups if self.lookups > 0 else None

    @property
    def hit_rate_p(self):
        return self.hits_p / self.lookups_p if self.lookups_p > 0 else None

    @property
    def hit_rate_b(self):
        return self.hits_b / self.lookups_b if self.lookups_b > 0 else None

    @property
    def mean_accepted(self):
        return self.accepted_total / self.verifications if self.verifications > 0 else None

    @property
    def mean_emitted(self):
        return self.tokens_emitted / self.verifications if self.verifications > 0 else None

    @property
    def E_hit(self):
        return self.hit_tokens / self.hits if self.hits > 0 else None

    @property
    def E_miss(self):
        misses = self.lookups - self.hits
        return self.miss_tokens / misses if misses > 0 else None

    def yields(self) -> TokenYields:
        E_hit = self.E_hit if self.E_hit is not None else 1.0
        E_miss = self.E_miss if self.E_miss is not None else 1.0
        return TokenYields(E_hit=E_hit, E_miss=E_miss)

    def summary(self) -> Dict:
        return {
            "mode": self.mode,
            "b": self.batch_size,
            "rounds": self.rounds,
            "tokens": self.tokens_emitted,
            "vtime": self.virtual_time,
            "tokens_per_vtime": self.tokens_per_vtime,
            "hit_rate": self.hit_rate,
            "hit_rate_p": self.hit_rate_p,
            "hit_rate_b": self.hit_rate_b,
            "mean_accepted": self.mean_accepted,
        }

    def __eq__(self, other):
        if not isinstance(other, RunStats):
            return NotImplemented
        return self.summary() == other.summary() and self.streams == other.streams

    def __str__(self):
        return "\n".join(f"{key}: {val}" for key, val in self.summary().items())


def _progress(verbose, r, total, prefix):
    if verbose and (r + 1 == total or (r + 1) % max(1, total // 100) == 0):
        print_progress_bar(r + 1, total, prefix=prefix)


def run_ar(lm_target: SyntheticLM, context: Sequence[int], N: int, seed=0, batch_size: int = 1,
           verbose=False) -> RunStats:
    """N tokens per sequence sampled straight from the target; one time unit per token."""
    if N < 1:
        raise RuntimeError(f"ERROR: N must be >= 1, got {N}")
    cdf = lm_target.scheme_table(Standard(lm_target.temperature))[1]
    stats = RunStats(mode="ar", batch_size=batch_size)
    for s, rngs in enumerate(sequence_streams(seed, batch_size)):
        stream = list(context)
        for _ in range(N):
            stream.append(sample_from_cdf(cdf[lm_target.context_index(stream)], rngs["target"]))
        stats.streams.append(stream[len(context):])
        _progress(verbose, s, batch_size, "AR")
    stats.rounds = N
    stats.tokens_emitted = N * batch_size
    stats.virtual_time = float(N)
    stats.verifications = N * batch_size
    return stats


def _finish_log(stats: RunStats, rows: List[Dict]):
    stats.log = pd.DataFrame(rows, columns=RUN_LOG_COLUMNS)


def run_sd(cfg: SimConfig, verbose=False) -> RunStats:
    cfg.validate()
    target, drafter = cfg.pair.target, cfg.pair.draft
    streams = sequence_streams(cfg.seed, cfg.batch_size)
    contexts = [cfg.start_context() for _ in range(cfg.batch_size)]
    n0 = len(contexts[0])
    stats = RunStats(mode="sd", batch_size=cfg.batch_size)
    clock = VirtualClock()
    rows = []

    for r in range(cfg.rounds):
        for s, rngs in enumerate(streams):
            spec = draft(drafter, contexts[s], cfg.K, cfg.scheme, rngs["draft"])
            result = verify(target, contexts[s], spec, rngs["target"])
            contexts[s].extend(result.emitted)
            stats.tokens_emitted += len(result.emitted)
            stats.accepted_total += result.outcome.k
            stats.verifications += 1
            if cfg.record_log:
                rows.append({"round": r, "seq": s, "prev_origin": None, "hit": None, "origin": "primary",
                             "accepted": result.outcome.k, "emitted": len(result.emitted)})
        clock.advance(1.0 + cfg.timing.T_p)
        stats.rounds += 1
        _progress(verbose, r, cfg.rounds, "SD")
        if cfg.max_tokens is not None and min(len(c) - n0 for c in contexts) >= cfg.max_tokens:
            break

    stats.virtual_time = clock.now
    stats.streams = [c[n0:] for c in contexts]
    if cfg.record_log:
        _finish_log(stats, rows)
    return stats


def backup_speculation(cfg: SimConfig, context, rng) -> Speculation:
    if cfg.backup_kind == BackupKind.SAME_PRIMARY_JIT:
        return draft(cfg.pair.draft, context, cfg.K, cfg.scheme, rng, origin=Origin.BACKUP)
    return draft_uniform(cfg.pair.draft.V, cfg.K, rng, origin=Origin.BACKUP)


def run_ssd(cfg: SimConfig, verbose=False) -> RunStats:
    """
    Speculative-speculative decoding for a batch of cfg.batch_size independent
    sequences sharing one round clock (batch_size=1 is plain SSD).

    Every verification is accompanied by a cache built against the
    speculation under verification, with the plan of that speculation's
    origin. If the realized outcome is cached the next speculation comes from
    the cache (primary origin), otherwise from the backup speculator.
    """
    cfg.validate(needs_plans=True)
    target, drafter = cfg.pair.target, cfg.pair.draft
    streams = sequence_streams(cfg.seed, cfg.batch_size)
    contexts = [cfg.start_context() for _ in range(cfg.batch_size)]
    n0 = len(contexts[0])
    stats = RunStats(mode="ssd", batch_size=cfg.batch_size)
    clock = VirtualClock()
    rows = []

    specs = [draft(drafter, contexts[s], cfg.K, cfg.scheme, streams[s]["draft"]) for s in range(cfg.batch_size)]
    hit_flags = [None] * cfg.batch_size
    prev_origins = [None] * cfg.batch_size
    clock.advance(cfg.timing.T_p)

    for r in range(cfg.rounds):
        # this round's speculations came from the lookups of the previous round
        if r == 0:
            clock.advance(1.0)
        elif all(hit_flags):
            stats.all_hit_rounds += 1
            clock.advance(max(1.0, cfg.timing.T_p))
        else:
            clock.advance(1.0 + cfg.backup_time)

        pending = []
        for s, rngs in enumerate(streams):
            spec = specs[s]
            cache = build_cache(drafter, contexts[s], spec, cfg.plan_for(spec.origin), cfg.scheme, cfg.K,
                                rngs["cache"], lazy=cfg.lazy_cache)
            result = verify(target, contexts[s], spec, rngs["target"])
            contexts[s].extend(result.emitted)
            n_emitted = len(result.emitted)
            stats.tokens_emitted += n_emitted
            stats.accepted_total += result.outcome.k
            stats.verifications += 1
            if hit_flags[s] is not None:
                if hit_flags[s]:
                    stats.hit_tokens += n_emitted
                else:
                    stats.miss_tokens += n_emitted
            if cfg.record_log:
                rows.append({"round": r, "seq": s,
                             "prev_origin": None if prev_origins[s] is None else prev_origins[s].value,
                             "hit": hit_flags[s], "origin": spec.origin.value,
                             "accepted": result.outcome.k, "emitted": n_emitted})
            pending.append((cache, result))

        stats.rounds += 1
        _progress(verbose, r, cfg.rounds, "SSD")
        if r + 1 == cfg.rounds:
            break
        if cfg.max_tokens is not None and min(len(c) - n0 for c in contexts) >= cfg.max_tokens:
            break

        for s, (cache, result) in enumerate(pending):
            origin = specs[s].origin
            found = cache.lookup(result.outcome)
            if origin == Origin.PRIMARY:
                stats.lookups_p += 1
                stats.hits_p += int(found.hit)
            else:
                stats.lookups_b += 1
                stats.hits_b += int(found.hit)
            prev_origins[s] = origin
            hit_flags[s] = found.hit
            specs[s] = found.speculation if found.hit else backup_speculation(cfg, contexts[s], streams[s]["backup"])

    stats.virtual_time = clock.now
    stats.streams = [c[n0:] for c in contexts]
    if cfg.record_log:
        _finish_log(stats, rows)
    return stats


def run_ssd_batch(cfg: SimConfig, verbose=False) -> RunStats:
    return run_ssd(cfg, verbose=verbose)


class LosslessTest(NamedTuple):
    tv_distance: float
    statistic: float
    dof: int
    p_value: float
    passed: bool


def transition_counts(streams: Sequence[Sequence[int]], lm: SyntheticLM) -> np.ndarray:
    """Counts of (context, next token) over every sequence, skipping the first m tokens."""
    counts = np.zeros((lm.n_contexts, lm.V), dtype=np.int64)
    powers = lm.V ** np.arange(lm.m - 1, -1, -1)
    for stream in streams:
        toks = np.asarray(stream, dtype=np.int64)
        if len(toks) <= lm.m:
            continue
        if lm.m == 0:
            ctx = np.zeros(len(toks), dtype=np.int64)
        else:
            windows = np.lib.stride_tricks.sliding_window_view(toks[:-1], lm.m)
            ctx = windows @ powers
        np.add.at(counts, (ctx, toks[lm.m:]), 1)
    return counts


def _pooled_chi2(a: np.ndarray, b: np.ndarray, min_expected: float = 5.0):
    """Homogeneity chi-square of two count rows; cells with small expected counts are pooled."""
    table = np.vstack([a, b]).astype(float)
    table = table[:, table.sum(axis=0) > 0]
    n = table.sum()
    if table.shape[1] < 2 or np.any(table.sum(axis=1) == 0):
        return 0.0, 0
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    small = expected.min(axis=0) < min_expected
    if np.any(small):
        pooled = table[:, small].sum(axis=1, keepdims=True)
        table = np.hstack([table[:, ~small], pooled])
        expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
        if expected[:, -1].min() < min_expected and table.shape[1] > 2:
            # fold a still-small pool into the smallest remaining column
            j = int(np.argmin(table[:, :-1].sum(axis=0)))
            table[:, j] += table[:, -1]
            table = table[:, :-1]
            expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    if table.shape[1] < 2:
        return 0.0, 0
    stat = float(((table - expected) ** 2 / expected).sum())
    return stat, table.shape[1] - 1


def two_sample_lossless_test(stream_a, stream_b, lm: SyntheticLM, significance: float = 0.001) -> LosslessTest:
    """
    Per-context chi-square homogeneity test of next-token counts from two
    token streams (lists of per-sequence token lists), summed over contexts.
    The reported TV distance is the visit-weighted mean of the per-context
    distances between the two empirical next-token laws.
    """
    a = transition_counts(stream_a, lm)
    b = transition_counts(stream_b, lm)
    stat, dof = 0.0, 0
    tv, weight = 0.0, 0.0
    for c in range(lm.n_contexts):
        na, nb = a[c].sum(), b[c].sum()
        if na == 0 or nb == 0:
            continue
        s, d = _pooled_chi2(a[c], b[c])
        stat += s
        dof += d
        w = na + nb
        tv += w * 0.5 * np.abs(a[c] / na - b[c] / nb).sum()
        weight += w
    if dof == 0:
        raise RuntimeError("ERROR: not enough shared contexts for a two-sample test")
    p_value = float(chi2.sf(stat, dof))
    return LosslessTest(
        tv_distance=float(tv / weight),
        statistic=stat,
        dof=dof,
        p_value=p_value,
        passed=p_value >= significance,
    )
