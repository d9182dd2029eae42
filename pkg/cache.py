#!/usr/bin/env python

"""
Speculation cache construction (verification-outcome prediction) and fan-out
planning: uniform and geometric plans, their integer rounding, the exhaustive
integer optimum, and the stationarity check of the budget-constrained optimum.
"""

import itertools
from typing import Dict, List, NamedTuple, Optional, Sequence
import numpy as np

from dist import Saguaro, SamplingScheme, apply_scheme, as_probs, residual, top_f_indices
from lm import SyntheticLM
from specdec import Origin, Speculation, VerificationOutcome, context_tail, draft


class BudgetTooSmall(RuntimeError):
    pass


class FanOutPlan:
    def __init__(self, f, role: Origin = Origin.PRIMARY, budget: int = None, continuous=None):
        """
        Number of cached bonus-token candidates per accepted length k = 0..K.

        :param f: Integer vector F_0..F_K.
        :param role: Origin of the speculation this plan is used against.
        :param budget: Total budget B; defaults to sum(f).
        :param continuous: Unrounded plan the integer one was derived from, if any.
        """
        self.f = np.asarray(f, dtype=int)
        if self.f.ndim != 1 or len(self.f) < 2:
            raise RuntimeError(f"ERROR: a fan-out plan needs K+1 >= 2 entries, got {self.f}")
        if np.any(self.f < 0):
            raise RuntimeError(f"ERROR: fan-out entries must be nonnegative, got {self.f}")
        self.role = role
        self.budget = int(self.f.sum()) if budget is None else int(budget)
        if self.f.sum() > self.budget:
            raise RuntimeError(f"ERROR: fan-out {self.f.tolist()} exceeds budget {self.budget}")
        self.continuous = None if continuous is None else np.asarray(continuous, dtype=float)

    @property
    def K(self):
        return len(self.f) - 1

    def check_vocab(self, V: int):
        caps = vocab_caps(self.K, V)
        if np.any(self.f > caps):
            raise RuntimeError(
                f"ERROR: fan-out {self.f.tolist()} exceeds the vocabulary caps {caps.tolist()} for V={V}"
            )

    def __str__(self):
        return f"FanOutPlan({self.role.value}, B={self.budget}, f={self.f.tolist()})"


class Lookup(NamedTuple):
    hit: bool
    speculation: Optional[Speculation] = None


MISS = Lookup(False, None)


def vocab_caps(K: int, V: int) -> np.ndarray:
    # one token is excluded for k < K
    caps = np.full(K + 1, V - 1)
    caps[K] = V
    return caps


def candidate_tokens(lm_draft: SyntheticLM, ctx: Sequence[int], F: int, exclude: int = None) -> np.ndarray:
    """Top-F tokens by raw draft logit at ctx, skipping `exclude`."""
    order = lm_draft.ranking()[lm_draft.context_index(ctx)]
    if exclude is not None:
        order = order[order != exclude]
    return order[:F]


class SpeculationCache:
    def __init__(self, lm_draft: SyntheticLM, context: Sequence[int], spec: Speculation, plan: FanOutPlan,
                 scheme: SamplingScheme, K_next: int, rng: np.random.Generator, lazy: bool = False):
        """
        Mapping from predicted verification outcomes to next-round speculations.

        In lazy mode only the candidate sets are computed up front; the entry
        for an outcome is drafted when it is looked up, with fresh randomness
        from rng. Every entry is drafted from its own stream, so both modes
        give the same law for whatever entry is used.
        """
        if plan.K != spec.K:
            raise RuntimeError(f"ERROR: plan covers K={plan.K} but the speculation has K={spec.K}")
        if plan.role != spec.origin:
            raise RuntimeError(
                f"ERROR: {plan.role.value} plan used against a {spec.origin.value} speculation"
            )
        plan.check_vocab(lm_draft.V)
        self.round_origin = spec.origin
        self.plan = plan
        self.lazy = lazy

        self._lm_draft = lm_draft
        self._scheme = scheme
        self._K_next = K_next
        self._rng = rng
        self._tokens = spec.tokens
        self._base = context_tail(context, lm_draft.m)
        self._keys = predict_outcomes(lm_draft, context, spec, plan)
        self._candidates: Dict[int, set] = {k: set() for k in range(plan.K + 1)}
        for key in self._keys:
            self._candidates[key.k].add(key.bonus)

        self.entries: Dict[VerificationOutcome, Speculation] = {}
        if not lazy:
            for key, child in zip(self._keys, rng.spawn(len(self._keys))):
                self.entries[key] = self._draft_entry(key, child)

    def _prefix_context(self, k: int) -> list:
        return self._base + list(self._tokens[:k])

    def candidates(self, k: int) -> set:
        return self._candidates[k]

    def keys(self) -> List[VerificationOutcome]:
        return list(self._keys)

    def _draft_entry(self, key: VerificationOutcome, rng) -> Speculation:
        ctx = self._prefix_context(key.k) + [key.bonus]
        return draft(self._lm_draft, ctx, self._K_next, self._scheme, rng, origin=Origin.PRIMARY)

    def __contains__(self, outcome: VerificationOutcome):
        if not 0 <= outcome.k <= self.plan.K:
            return False
        return outcome.bonus in self.candidates(outcome.k)

    def __len__(self):
        return int(self.plan.f.sum())

    def lookup(self, outcome: VerificationOutcome) -> Lookup:
        if outcome not in self:
            return MISS
        if not self.lazy:
            return Lookup(True, self.entries[outcome])
        if outcome not in self.entries:
            self.entries[outcome] = self._draft_entry(outcome, self._rng)
        return Lookup(True, self.entries[outcome])


def predict_outcomes(lm_draft: SyntheticLM, context: Sequence[int], spec: Speculation,
                     plan: FanOutPlan) -> List[VerificationOutcome]:
    base = context_tail(context, lm_draft.m)
    out = []
    for k in range(plan.K + 1):
        exclude = spec.tokens[k] if k < plan.K else None
        for t in candidate_tokens(lm_draft, base + list(spec.tokens[:k]), int(plan.f[k]), exclude):
            out.append(VerificationOutcome(k, int(t)))
    return out


def build_cache(lm_draft: SyntheticLM, context: Sequence[int], spec_under_verification: Speculation,
                plan: FanOutPlan, scheme: SamplingScheme, K_next: int, rng: np.random.Generator,
                lazy: bool = False) -> SpeculationCache:
    return SpeculationCache(lm_draft, context, spec_under_verification, plan, scheme, K_next, rng, lazy=lazy)


def lookup(cache: SpeculationCache, outcome: VerificationOutcome) -> Lookup:
    return cache.lookup(outcome)


def round_plan(continuous, B: int, caps=None) -> np.ndarray:
    """
    Integer plan summing to B (or to sum(caps) if that is smaller): floor,
    raise every entry to at least 1, then hand out what is left by largest
    fractional remainder with ties to the lowest index.
    """
    cont = np.asarray(continuous, dtype=float)
    n = len(cont)
    caps = np.full(n, np.iinfo(int).max) if caps is None else np.asarray(caps, dtype=int)
    plan = np.minimum(np.maximum(np.floor(cont), 1), caps).astype(int)

    while plan.sum() > B:
        i = int(np.argmax(plan))
        if plan[i] <= 1:
            break
        plan[i] -= 1

    remainder = cont - plan
    order = np.argsort(-remainder, kind="stable")
    left = B - int(plan.sum())
    while left > 0 and np.any(plan < caps):
        for i in order:
            if left == 0:
                break
            if plan[i] < caps[i]:
                plan[i] += 1
                left -= 1
    return plan


def check_fanout_args(a: float, r: float, K: int, B: int):
    if not 0.0 < a < 1.0:
        raise RuntimeError(f"ERROR: acceptance rate a must be in (0, 1), got {a}")
    if not r > 0:
        raise RuntimeError(f"ERROR: power-law exponent r must be > 0, got {r}")
    if K < 1:
        raise RuntimeError(f"ERROR: lookahead K must be at least 1, got {K}")
    if B < K + 1:
        raise BudgetTooSmall(f"ERROR: budget B={B} is smaller than K+1={K + 1}")


def continuous_geometric_fanout(a: float, r: float, K: int, B: float) -> np.ndarray:
    check_fanout_args(a, r, K, B)
    log_a = np.log(a) / (1.0 + r)
    head = np.exp(K * log_a)
    tail_factor = (1.0 - a) ** (-1.0 / (1.0 + r))
    # (1 - a^{K/(1+r)}) / (1 - a^{1/(1+r)}), stable for large r
    series = np.expm1(K * log_a) / np.expm1(log_a)
    F0 = B / (head * tail_factor + series)
    f = F0 * np.exp(np.arange(K + 1) * log_a)
    f[K] = F0 * head * tail_factor
    return f


def geometric_fanout(a: float, r: float, K: int, B: int, role: Origin = Origin.PRIMARY, V: int = None) -> FanOutPlan:
    cont = continuous_geometric_fanout(a, r, K, B)
    caps = None if V is None else vocab_caps(K, V)
    return FanOutPlan(round_plan(cont, B, caps), role=role, budget=B, continuous=cont)


def uniform_fanout(K: int, B: int, role: Origin = Origin.PRIMARY, V: int = None) -> FanOutPlan:
    if B < K + 1:
        raise BudgetTooSmall(f"ERROR: budget B={B} is smaller than K+1={K + 1}")
    cont = np.full(K + 1, B / (K + 1))
    caps = None if V is None else vocab_caps(K, V)
    return FanOutPlan(round_plan(cont, B, caps), role=role, budget=B, continuous=cont)


def exhaustive_fanout(K: int, V: int, role: Origin = Origin.PRIMARY) -> FanOutPlan:
    """Plan caching every possible outcome."""
    caps = vocab_caps(K, V)
    return FanOutPlan(caps, role=role, budget=int(caps.sum()))


def outcome_weights(a: float, K: int) -> np.ndarray:
    """Probability that exactly k tokens are accepted, k = 0..K."""
    w = a ** np.arange(K + 1) * (1.0 - a)
    w[K] = a**K
    return w


def powerlaw_hit(F, r: float) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(F >= 1, 1.0 - np.power(np.maximum(F, 1.0), -r), 0.0)


def conditional_hit_rate(plan, a: float, r: float) -> float:
    f = plan.f if isinstance(plan, FanOutPlan) else np.asarray(plan, dtype=float)
    K = len(f) - 1
    return float(outcome_weights(a, K) @ powerlaw_hit(f, r))


def lagrange_residual(plan, a: float, r: float) -> float:
    """
    Largest relative violation of the stationarity conditions of the
    budget-constrained hit-rate maximum: p'(F_k) = a^-k p'(F_0) for k < K and
    p'(F_K) = (1-a) a^-K p'(F_0), with p'(F) = r F^(-r-1).
    """
    f = plan.continuous if isinstance(plan, FanOutPlan) else np.asarray(plan, dtype=float)
    if np.any(f <= 0):
        raise RuntimeError(f"ERROR: stationarity check needs positive entries, got {f}")
    K = len(f) - 1
    deriv = r * f ** (-r - 1.0)
    target = deriv[0] * a ** (-np.arange(K + 1, dtype=float))
    target[K] *= 1.0 - a
    return float(np.max(np.abs(deriv - target) / target))


def brute_force_fanout(a: float, r: float, K: int, B: int, role: Origin = Origin.PRIMARY) -> FanOutPlan:
    """Best integer plan with every F_k >= 1 and sum B."""
    if B < K + 1:
        raise BudgetTooSmall(f"ERROR: budget B={B} is smaller than K+1={K + 1}")
    weights = outcome_weights(a, K)
    best, best_val = None, -np.inf
    # stars and bars over B - (K+1) extra units
    extra = B - (K + 1)
    for bars in itertools.combinations(range(extra + K), K):
        edges = (-1,) + bars + (extra + K,)
        f = np.array([edges[i + 1] - edges[i] - 1 for i in range(K + 1)]) + 1
        val = float(weights @ powerlaw_hit(f, r))
        if val > best_val + 1e-15:
            best, best_val = f, val
    return FanOutPlan(best, role=role, budget=B)


def residual_hit_rate(p_target, z, F: int, C: float, temperature: float = 1.0) -> float:
    """
    Probability that a bonus token drawn from the residual lands in the top-F
    draft tokens when drafting with Saguaro(F, C). Equal to 1 when the
    residual has no mass.
    """
    z = np.asarray(z, dtype=float)
    p_c = apply_scheme(z, Saguaro(F, C, temperature)).probs
    u = np.maximum(as_probs(p_target) - p_c, 0.0)
    inside = u[top_f_indices(z, F)].sum()
    total = u.sum()
    if total <= 0:
        return 1.0
    return float(inside / total)


def rejection_hit_rate(p_target, z, scheme: SamplingScheme, F: int) -> float:
    """
    Exact hit probability of a one-token round given that the drafted token
    is rejected, with the cache holding the top-F raw draft logits other than
    the drafted token.
    """
    z = np.asarray(z, dtype=float)
    p_t = as_probs(p_target)
    p_d = apply_scheme(z, scheme).probs
    reject = p_d * (1.0 - np.minimum(1.0, np.divide(p_t, p_d, out=np.ones_like(p_d), where=p_d > 0)))
    reject_mass = reject.sum()
    if reject_mass <= 0:
        return 1.0
    r = residual(p_t, p_d).probs
    hit = 0.0
    for x in np.flatnonzero(reject > 0):
        hit += reject[x] * r[top_f_indices(z, F, exclude=int(x))].sum()
    return float(hit / reject_mass)
