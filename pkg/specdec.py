#!/usr/bin/env python

"""
Lossless speculative decoding: draft a K-token speculation, verify it against
the target with accept/reject and a bonus token, and enumerate the exact law
of one round on small models.
"""

from collections import defaultdict
from enum import Enum
from typing import Dict, NamedTuple, Sequence, Tuple
import numpy as np

from dist import (
    Categorical,
    DegenerateResidual,
    SamplingScheme,
    Standard,
    residual,
    sample_from_cdf,
    total_variation,
)
from lm import SyntheticLM

# enumeration limits for the exact oracle
EXACT_MAX_VOCAB = 32
EXACT_MAX_K = 3
EXACT_MAX_ORDER = 1


class TooLarge(RuntimeError):
    pass


class Origin(Enum):
    PRIMARY = "primary"
    BACKUP = "backup"


class VerificationOutcome(NamedTuple):
    k: int
    bonus: int


class RoundResult(NamedTuple):
    outcome: VerificationOutcome
    emitted: Tuple[int, ...]


class Speculation:
    def __init__(self, tokens, draft_dists, origin: Origin = Origin.PRIMARY):
        """
        :param tokens: Drafted tokens s_1..s_K.
        :param draft_dists: Array of shape (K, V); row i is the exact distribution s_{i+1} was drawn from.
        :param origin: Which speculator produced the tokens.
        """
        self.tokens = tuple(int(t) for t in tokens)
        self.draft_dists = np.asarray(draft_dists, dtype=np.float64)
        self.origin = origin
        if len(self.tokens) < 1:
            raise RuntimeError("ERROR: a speculation needs at least one token")
        if self.draft_dists.shape[0] != len(self.tokens):
            raise RuntimeError(
                f"ERROR: {len(self.tokens)} tokens but {self.draft_dists.shape[0]} draft distributions"
            )

    @property
    def K(self):
        return len(self.tokens)

    def dist(self, i: int) -> Categorical:
        return Categorical(self.draft_dists[i], check=False)

    def __repr__(self):
        return f"Speculation(tokens={self.tokens}, origin={self.origin.value})"


def context_tail(context: Sequence[int], m: int) -> list:
    return list(context[len(context) - m:]) if m > 0 else []


def accept_probability(p_target_x: float, p_draft_x: float) -> float:
    return min(1.0, p_target_x / p_draft_x)


def draft(lm_draft: SyntheticLM, context: Sequence[int], K: int, scheme: SamplingScheme,
          rng: np.random.Generator, origin: Origin = Origin.PRIMARY) -> Speculation:
    if K < 1:
        raise RuntimeError(f"ERROR: lookahead K must be at least 1, got {K}")
    probs, cdf = lm_draft.scheme_table(scheme)
    ctx = context_tail(context, lm_draft.m)
    tokens = []
    dists = np.empty((K, lm_draft.V))
    for i in range(K):
        c = lm_draft.context_index(ctx)
        tok = sample_from_cdf(cdf[c], rng)
        dists[i] = probs[c]
        tokens.append(tok)
        ctx.append(tok)
    return Speculation(tokens, dists, origin=origin)


def draft_uniform(V: int, K: int, rng: np.random.Generator, origin: Origin = Origin.BACKUP) -> Speculation:
    """Random-token speculation with its uniform draft distributions recorded."""
    tokens = rng.integers(0, V, size=K)
    return Speculation(tokens, np.full((K, V), 1.0 / V), origin=origin)


def verify(lm_target: SyntheticLM, context: Sequence[int], spec: Speculation,
           rng: np.random.Generator) -> RoundResult:
    # rng order: one accept coin per position, then the bonus draw
    probs, cdf = lm_target.scheme_table(Standard(lm_target.temperature))
    ctx = context_tail(context, lm_target.m)
    for i, x in enumerate(spec.tokens):
        p_t = probs[lm_target.context_index(ctx)]
        p_d = spec.draft_dists[i]
        if not p_d[x] > 0:
            raise RuntimeError(f"ERROR: drafted token {x} has zero draft probability at position {i}")
        if rng.random() < accept_probability(p_t[x], p_d[x]):
            ctx.append(x)
            continue
        r = residual(p_t, p_d)
        bonus = sample_from_cdf(np.cumsum(r.probs), rng)
        return RoundResult(VerificationOutcome(i, bonus), spec.tokens[:i] + (bonus,))

    bonus = sample_from_cdf(cdf[lm_target.context_index(ctx)], rng)
    return RoundResult(VerificationOutcome(spec.K, bonus), spec.tokens + (bonus,))


def check_exact_limits(lm_target: SyntheticLM, K: int):
    if lm_target.V > EXACT_MAX_VOCAB or K > EXACT_MAX_K or lm_target.m > EXACT_MAX_ORDER:
        raise TooLarge(
            f"ERROR: exact enumeration needs V <= {EXACT_MAX_VOCAB}, K <= {EXACT_MAX_K}, m <= {EXACT_MAX_ORDER}; "
            f"got V={lm_target.V}, K={K}, m={lm_target.m}"
        )


def exact_round_distribution(lm_target: SyntheticLM, lm_draft: SyntheticLM, context: Sequence[int],
                             K: int, scheme: SamplingScheme) -> Dict[Tuple[int, ...], float]:
    """
    Exact probability of every sequence one draft+verify round can emit,
    summed over draft paths, accept coins and bonus draws.
    """
    check_exact_limits(lm_target, K)
    p_target = lm_target.probs_table()
    p_draft = lm_draft.scheme_table(scheme)[0]
    V = lm_target.V

    # bonus-token law accumulated per emitted prefix
    bonus_mass = defaultdict(lambda: np.zeros(V))

    def walk(ctx, prefix, weight, i):
        p_t = p_target[lm_target.context_index(ctx)]
        if i == K:
            bonus_mass[prefix] += weight * p_t
            return
        p_d = p_draft[lm_draft.context_index(ctx)]
        reject_mass = 0.0
        for x in np.flatnonzero(p_d > 0):
            a = accept_probability(p_t[x], p_d[x])
            if a > 0:
                walk(ctx[1:] + [int(x)] if lm_target.m > 0 else ctx, prefix + (int(x),), weight * p_d[x] * a, i + 1)
            reject_mass += p_d[x] * (1.0 - a)
        if reject_mass > 0:
            try:
                bonus_mass[prefix] += weight * reject_mass * residual(p_t, p_d).probs
            except DegenerateResidual:
                # only reachable through rounding when p_t == p_d
                if reject_mass > 1e-15:
                    raise

    walk(context_tail(context, lm_target.m), (), 1.0, 0)

    out = {}
    for prefix, mass in bonus_mass.items():
        for t in np.flatnonzero(mass > 0):
            out[prefix + (int(t),)] = float(mass[t])
    return out


def _extend_with_target(lm_target, ctx, prefix, weight, depth, out):
    if len(prefix) >= depth:
        out[prefix[:depth]] += weight
        return
    p_t = lm_target.probs_table()[lm_target.context_index(ctx)]
    for t in np.flatnonzero(p_t > 0):
        nxt = ctx[1:] + [int(t)] if lm_target.m > 0 else ctx
        _extend_with_target(lm_target, nxt, prefix + (int(t),), weight * p_t[t], depth, out)


def emitted_prefix_distribution(round_dist: Dict[Tuple[int, ...], float], lm_target: SyntheticLM,
                                context: Sequence[int], depth: int) -> Dict[Tuple[int, ...], float]:
    """Law of the first `depth` tokens, continuing short emissions with the target chain."""
    out = defaultdict(float)
    for emitted, w in round_dist.items():
        ctx = context_tail(list(context) + list(emitted), lm_target.m)
        _extend_with_target(lm_target, ctx, tuple(emitted), w, depth, out)
    return dict(out)


def target_prefix_distribution(lm_target: SyntheticLM, context: Sequence[int], depth: int) -> Dict[Tuple[int, ...], float]:
    out = defaultdict(float)
    _extend_with_target(lm_target, context_tail(context, lm_target.m), (), 1.0, depth, out)
    return dict(out)


def dict_total_variation(p: Dict, q: Dict) -> float:
    keys = sorted(set(p) | set(q))
    return total_variation([p.get(key, 0.0) for key in keys], [q.get(key, 0.0) for key in keys])


def exact_lossless_tv(lm_target: SyntheticLM, lm_draft: SyntheticLM, context: Sequence[int],
                      K: int, scheme: SamplingScheme) -> float:
    """Largest TV distance between emitted and target prefix laws over depths 1..K+1."""
    round_dist = exact_round_distribution(lm_target, lm_draft, context, K, scheme)
    worst = 0.0
    for depth in range(1, K + 2):
        emitted = emitted_prefix_distribution(round_dist, lm_target, context, depth)
        target = target_prefix_distribution(lm_target, context, depth)
        worst = max(worst, dict_total_variation(emitted, target))
    return worst


def expected_tokens(alpha: float, K: int) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise RuntimeError(f"ERROR: alpha must be in [0, 1], got {alpha}")
    if alpha >= 1.0:
        return float(K + 1)
    return (1.0 - alpha ** (K + 1)) / (1.0 - alpha)
