import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from lm import LMPair, SyntheticLM, derive_draft, make_lm, mean_acceptance  # noqa: E402

TARGET_4 = (0.48, 0.48, 0.02, 0.02)
DRAFT_4 = (0.49, 0.49, 0.01, 0.01)


def mixed_pair(V, m, epsilon, seed=0, concentration=0.5):
    """Target from make_lm and a draft mixed with noise; acceptance is at least 1 - epsilon."""
    target = make_lm(V, m, concentration, seed=seed)
    draft = derive_draft(target, epsilon, noise_seed=seed + 1)
    return LMPair(target, draft, mean_acceptance(target, draft), epsilon=epsilon)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def construction_pair():
    target = SyntheticLM.from_probs([TARGET_4])
    draft = SyntheticLM.from_probs([DRAFT_4])
    return LMPair(target, draft, mean_acceptance(target, draft))


@pytest.fixture(scope="session")
def small_pair():
    return mixed_pair(6, 1, 0.3, seed=3)


@pytest.fixture(scope="session")
def medium_pair():
    return mixed_pair(16, 1, 0.25, seed=0)
