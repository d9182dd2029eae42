#!/usr/bin/env python

"""
Categorical distributions and the sampling math shared by every other module:
sampling schemes (standard softmax with temperature and the Saguaro
down-weighting scheme), residual distributions and acceptance rates.
"""

from dataclasses import dataclass
from typing import Union
import numpy as np
from scipy.special import softmax

# absolute tolerance for probability invariants
PROB_TOL = 1e-12


class AllZero(RuntimeError):
    pass


class DegenerateResidual(RuntimeError):
    pass


class Categorical:
    def __init__(self, probs, check=True):
        """
        Probability vector over a vocabulary of size V.

        :param probs: Nonnegative entries summing to 1.
        :param check: Validate the invariants (disable only for vectors
        produced by this module's own normalization).
        """
        p = np.array(probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise RuntimeError(f"ERROR: Categorical needs a nonempty 1-d vector, got shape {p.shape}")
        if check:
            if not np.all(np.isfinite(p)) or np.any(p < 0):
                raise RuntimeError(f"ERROR: Categorical entries must be finite and nonnegative: {p}")
            if abs(p.sum() - 1.0) > PROB_TOL:
                raise RuntimeError(f"ERROR: Categorical entries sum to {p.sum():.15g}, not 1")
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def from_logits(cls, z, temperature: float = 1.0):
        return cls(softmax_with_temperature(z, temperature), check=False)

    @property
    def V(self):
        return len(self.probs)

    def __len__(self):
        return len(self.probs)

    def __getitem__(self, i):
        return self.probs[i]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.probs
        return self.probs.astype(dtype)

    def __repr__(self):
        return f"Categorical({np.array2string(self.probs, precision=6)})"


ProbLike = Union[Categorical, np.ndarray, list, tuple]


def as_probs(p: ProbLike) -> np.ndarray:
    if isinstance(p, Categorical):
        return p.probs
    return np.asarray(p, dtype=np.float64)


@dataclass(frozen=True)
class Standard:
    temperature: float = 1.0

    def validate(self, V: int):
        if not self.temperature > 0:
            raise RuntimeError(f"ERROR: temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class Saguaro:
    """Down-weights the top-F draft tokens by C before normalizing."""

    F: int
    C: float
    temperature: float = 1.0

    def validate(self, V: int):
        if not self.temperature > 0:
            raise RuntimeError(f"ERROR: temperature must be > 0, got {self.temperature}")
        if not 1 <= self.F <= V:
            raise RuntimeError(f"ERROR: Saguaro F must be in [1, {V}], got {self.F}")
        if not 0.0 <= self.C <= 1.0:
            raise RuntimeError(f"ERROR: Saguaro C must be in [0, 1], got {self.C}")


SamplingScheme = Union[Standard, Saguaro]


def normalize(weights) -> Categorical:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise RuntimeError(f"ERROR: cannot normalize negative weights: {w}")
    total = w.sum()
    if not total > 0:
        raise AllZero("ERROR: cannot normalize a weight vector with zero mass")
    return Categorical(w / total, check=False)


def softmax_with_temperature(z, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not temperature > 0:
        raise RuntimeError(f"ERROR: temperature must be > 0, got {temperature}")
    return softmax(z / temperature)


def top_f_indices(z, F: int, exclude: int = None) -> np.ndarray:
    """
    Indices of the F largest entries of z, largest first. Ties go to the
    lowest index. If exclude is given, that index is skipped and the next
    one takes its place.
    """
    order = np.argsort(-np.asarray(z, dtype=np.float64), kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order[:F]


def apply_scheme(z, scheme: SamplingScheme) -> Categorical:
    z = np.asarray(z, dtype=np.float64)
    scheme.validate(len(z))
    if isinstance(scheme, Standard) or scheme.C == 1.0:
        return Categorical(softmax_with_temperature(z, scheme.temperature), check=False)

    scaled = z / scheme.temperature
    weights = np.exp(scaled - scaled.max())
    top = top_f_indices(z, scheme.F)
    rest = np.ones(len(z), dtype=bool)
    rest[top] = False
    # top-F holds all the mass: C scales every weight and cancels
    if not weights[rest].sum() > 0:
        return Categorical(softmax(scaled), check=False)
    weights[top] *= scheme.C
    return normalize(weights)


def residual(p_target: ProbLike, p_draft: ProbLike) -> Categorical:
    pt, pd_ = as_probs(p_target), as_probs(p_draft)
    if pt.shape != pd_.shape:
        raise RuntimeError(f"ERROR: residual needs equal lengths, got {pt.shape} and {pd_.shape}")
    try:
        return normalize(np.maximum(pt - pd_, 0.0))
    except AllZero:
        raise DegenerateResidual(
            "ERROR: residual has zero mass (draft covers the target everywhere)"
        )


def total_variation(p: ProbLike, q: ProbLike) -> float:
    return 0.5 * float(np.abs(as_probs(p) - as_probs(q)).sum())


def acceptance_rate(p_target: ProbLike, p_draft: ProbLike) -> float:
    pt, pd_ = as_probs(p_target), as_probs(p_draft)
    if pt.shape != pd_.shape:
        raise RuntimeError(f"ERROR: acceptance_rate needs equal lengths, got {pt.shape} and {pd_.shape}")
    min_sum = float(np.minimum(pt, pd_).sum())
    l1_form = 1.0 - total_variation(pt, pd_)
    if abs(min_sum - l1_form) > PROB_TOL:
        raise RuntimeError(
            f"ERROR: acceptance rate forms disagree: {min_sum:.15g} vs {l1_form:.15g}"
        )
    return min_sum


def sample_from_cdf(cdf: np.ndarray, rng: np.random.Generator, size=None):
    """Inverse-CDF draw; cdf is the cumulative sum of the (possibly unnormalized) weights."""
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    # u can round up to cdf[-1]; fall back to the last token with mass
    last = int(np.searchsorted(cdf, cdf[-1], side="left"))
    if size is None:
        return int(min(idx, last))
    return np.minimum(idx, last)


def sample(p: ProbLike, rng: np.random.Generator, size=None):
    return sample_from_cdf(np.cumsum(as_probs(p)), rng, size=size)
