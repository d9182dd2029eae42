#!/usr/bin/env python

"""
Synthetic context-conditioned language models (order-m Markov tables) used as
target and draft, plus the calibration knob that derives a draft at a desired
acceptance rate.

Contexts are the last m tokens, indexed lexicographically (base V, oldest
token most significant). Rows are stored as logits.
"""

import itertools
import json
from typing import Dict, Sequence
import numpy as np
from scipy.optimize import brentq
from scipy.special import softmax

from dist import Categorical, Saguaro, SamplingScheme, Standard, apply_scheme

# zero probabilities are stored at this logit; its softmax weight is exactly 0 in float64
LOGIT_FLOOR = -1000.0

MAX_ORDER = 2
MAX_VOCAB = 1024


class Unreachable(RuntimeError):
    pass


def probs_to_logits(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(rows)
    return np.maximum(logits, LOGIT_FLOOR)


class SyntheticLM:
    def __init__(self, V: int, m: int, logits, seed: int = 0, temperature: float = 1.0):
        """
        Dense order-m Markov language model.

        :param V: Vocabulary size.
        :param m: Order (number of previous tokens the next-token law depends on).
        :param logits: Array of shape (V**m, V), one row per context.
        :param seed: Seed the table was generated from (kept for provenance).
        :param temperature: Temperature at which conditional() reports the model.
        """
        if V < 2 or V > MAX_VOCAB:
            raise RuntimeError(f"ERROR: vocabulary size must be in [2, {MAX_VOCAB}], got {V}")
        if m < 0 or m > MAX_ORDER:
            raise RuntimeError(f"ERROR: order must be in [0, {MAX_ORDER}], got {m}")
        table = np.array(logits, dtype=np.float64)
        if table.shape != (V**m, V):
            raise RuntimeError(f"ERROR: logit table must have shape {(V**m, V)}, got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise RuntimeError("ERROR: logit table has non-finite entries")
        if not temperature > 0:
            raise RuntimeError(f"ERROR: temperature must be > 0, got {temperature}")
        table.setflags(write=False)

        self.V = V
        self.m = m
        self.logits = table
        self.seed = seed
        self.temperature = temperature

        # memoized per-scheme probability and cdf tables
        self._tables: Dict = {}
        self._ranking = None

    @classmethod
    def from_probs(cls, rows, m: int = 0, seed: int = 0, temperature: float = 1.0):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        return cls(rows.shape[1], m, probs_to_logits(rows), seed=seed, temperature=temperature)

    def with_temperature(self, temperature: float):
        return SyntheticLM(self.V, self.m, self.logits, seed=self.seed, temperature=temperature)

    @property
    def n_contexts(self):
        return self.V**self.m

    def contexts(self):
        return itertools.product(range(self.V), repeat=self.m)

    def context_index(self, context: Sequence[int]) -> int:
        if self.m == 0:
            return 0
        if len(context) < self.m:
            raise RuntimeError(f"ERROR: context {tuple(context)} shorter than model order {self.m}")
        ix = 0
        for tok in context[len(context) - self.m:]:
            ix = ix * self.V + int(tok)
        return ix

    def logits_at(self, context: Sequence[int]) -> np.ndarray:
        return self.logits[self.context_index(context)]

    def conditional(self, context: Sequence[int]) -> Categorical:
        return Categorical(self.probs_table()[self.context_index(context)], check=False)

    def probs_table(self) -> np.ndarray:
        return self.scheme_table(Standard(self.temperature))[0]

    def scheme_table(self, scheme: SamplingScheme):
        """(probs, cdf) tables of shape (V**m, V) with the scheme applied to every row."""
        if isinstance(scheme, Saguaro) and scheme.C == 1.0:
            scheme.validate(self.V)
            scheme = Standard(scheme.temperature)
        if scheme not in self._tables:
            scheme.validate(self.V)
            if isinstance(scheme, Standard):
                probs = softmax(self.logits / scheme.temperature, axis=1)
            else:
                probs = np.vstack([apply_scheme(z, scheme).probs for z in self.logits])
            probs.setflags(write=False)
            cdf = np.cumsum(probs, axis=1)
            cdf.setflags(write=False)
            self._tables[scheme] = (probs, cdf)
        return self._tables[scheme]

    def ranking(self) -> np.ndarray:
        """Per-context token order by raw logit, largest first, ties to the lowest index."""
        if self._ranking is None:
            self._ranking = np.argsort(-self.logits, axis=1, kind="stable")
            self._ranking.setflags(write=False)
        return self._ranking

    def __str__(self):
        return f"SyntheticLM(V={self.V}, m={self.m}, seed={self.seed}, temperature={self.temperature})"


class LMPair:
    def __init__(self, target: SyntheticLM, draft: SyntheticLM, nominal_alpha: float, epsilon: float = None):
        if target.V != draft.V or target.m != draft.m:
            raise RuntimeError(
                f"ERROR: target (V={target.V}, m={target.m}) and draft (V={draft.V}, m={draft.m}) do not match"
            )
        self.target = target
        self.draft = draft
        self.nominal_alpha = nominal_alpha
        self.epsilon = epsilon

    def __str__(self):
        return f"LMPair(alpha={self.nominal_alpha:.4f}, epsilon={self.epsilon})"


def make_lm(V: int, m: int, concentration: float, seed: int) -> SyntheticLM:
    if V < 2:
        raise RuntimeError(f"ERROR: vocabulary size must be at least 2, got {V}")
    if not concentration > 0:
        raise RuntimeError(f"ERROR: concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(V, float(concentration)), size=V**m)
    return SyntheticLM(V, m, probs_to_logits(rows), seed=seed)


def derive_draft(target: SyntheticLM, epsilon: float, noise_seed: int) -> SyntheticLM:
    """
    Mix every target row (at the target's temperature) with an independent
    Dirichlet(1) row: p_d = (1 - epsilon) * p_t + epsilon * q.
    The noise rows depend only on noise_seed, so acceptance is linear in epsilon.
    The draft carries the target's temperature and reports p_d at it.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise RuntimeError(f"ERROR: epsilon must be in [0, 1], got {epsilon}")
    p_t = target.probs_table()
    q = np.random.default_rng(noise_seed).dirichlet(np.ones(target.V), size=target.n_contexts)
    p_d = (1.0 - epsilon) * p_t + epsilon * q
    T = target.temperature
    return SyntheticLM(target.V, target.m, probs_to_logits(p_d) * T, seed=noise_seed, temperature=T)


def acceptance_by_context(target: SyntheticLM, draft: SyntheticLM, scheme: SamplingScheme = None) -> np.ndarray:
    p_t = target.probs_table()
    p_d = draft.scheme_table(scheme if scheme is not None else Standard(target.temperature))[0]
    return np.minimum(p_t, p_d).sum(axis=1)


def mean_acceptance(target: SyntheticLM, draft: SyntheticLM, scheme: SamplingScheme = None) -> float:
    return float(acceptance_by_context(target, draft, scheme).mean())


def stationary_distribution(lm: SyntheticLM, tol: float = 1e-14, max_iter: int = 100000) -> np.ndarray:
    """Stationary law over contexts of the chain the model generates (power iteration)."""
    if lm.m == 0:
        return np.ones(1)
    if lm.n_contexts > 4096:
        raise RuntimeError(f"ERROR: too many contexts ({lm.n_contexts}) for the stationary distribution")
    probs = lm.probs_table()
    n = lm.n_contexts
    # context c followed by token t moves to context (c * V + t) mod V**m
    trans = np.zeros((n, n))
    for c in range(n):
        nxt = (c * lm.V) % n + np.arange(lm.V)
        np.add.at(trans[c], nxt, probs[c])
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = pi @ trans
        if np.abs(new - pi).sum() < tol:
            return new / new.sum()
        pi = new
    raise RuntimeError(f"ERROR: stationary distribution did not converge in {max_iter} iterations")


def weighted_acceptance(target: SyntheticLM, draft: SyntheticLM, scheme: SamplingScheme = None) -> float:
    """Acceptance rate averaged with the target chain's stationary context weights."""
    pi = stationary_distribution(target)
    return float(pi @ acceptance_by_context(target, draft, scheme))


def calibrate_pair(target: SyntheticLM, alpha_goal: float, seed: int, verbose=False) -> LMPair:
    if not 0.0 < alpha_goal < 1.0:
        raise RuntimeError(f"ERROR: alpha_goal must be in (0, 1), got {alpha_goal}")

    def alpha_at(eps):
        return mean_acceptance(target, derive_draft(target, eps, seed))

    alpha_min, alpha_max = alpha_at(1.0), alpha_at(0.0)
    if alpha_goal < alpha_min:
        raise Unreachable(
            f"ERROR: alpha_goal {alpha_goal} is below the attainable minimum {alpha_min:.6f} for this target"
        )
    if alpha_goal > alpha_max:
        raise Unreachable(
            f"ERROR: alpha_goal {alpha_goal} is above the attainable maximum {alpha_max:.6f} for this target"
        )
    if alpha_goal == alpha_min:
        eps = 1.0
    elif alpha_goal == alpha_max:
        eps = 0.0
    else:
        eps = brentq(lambda e: alpha_at(e) - alpha_goal, 0.0, 1.0, xtol=1e-12, maxiter=40)

    draft = derive_draft(target, eps, seed)
    alpha = mean_acceptance(target, draft)
    if verbose:
        print(f"Calibrated epsilon={eps:.6g} for alpha_goal={alpha_goal}: mean acceptance {alpha:.6f}")
    return LMPair(target, draft, alpha, epsilon=eps)


def save_lm(lm: SyntheticLM, filename: str):
    data = {"v": lm.V, "m": lm.m, "seed": int(lm.seed), "rows": lm.logits.tolist()}
    try:
        with open(filename, "w") as f:
            json.dump(data, f)
    except Exception as e:
        raise RuntimeError(f"ERROR: Could not save language model to {filename}: {str(e)}")


def load_lm(filename: str) -> SyntheticLM:
    try:
        with open(filename) as f:
            data = json.load(f)
    except Exception as e:
        raise RuntimeError(f"ERROR: Could not load language model at {filename}: {str(e)}")
    missing = [key for key in ("v", "m", "seed", "rows") if key not in data]
    if len(missing) > 0:
        raise RuntimeError(f"ERROR: language model file {filename} is missing keys {missing}")
    return SyntheticLM(int(data["v"]), int(data["m"]), data["rows"], seed=int(data["seed"]))
