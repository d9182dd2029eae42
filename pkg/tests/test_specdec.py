import numpy as np
import pytest

import specdec
from conftest import DRAFT_4, TARGET_4, mixed_pair
from dist import Saguaro, Standard
from lm import SyntheticLM, make_lm
from specdec import (
    Origin,
    Speculation,
    TooLarge,
    draft,
    draft_uniform,
    exact_lossless_tv,
    exact_round_distribution,
    expected_tokens,
    verify,
)


class TestDraftAndVerify:
    def test_draft_records_distributions(self, small_pair, rng):
        spec = draft(small_pair.draft, [0], 3, Standard(), rng)
        assert spec.K == 3 and spec.draft_dists.shape == (3, 6)
        assert spec.origin == Origin.PRIMARY
        np.testing.assert_allclose(spec.draft_dists.sum(axis=1), 1.0, atol=1e-12)

    def test_draft_rejects_bad_k(self, small_pair, rng):
        with pytest.raises(RuntimeError):
            draft(small_pair.draft, [0], 0, Standard(), rng)

    def test_identical_models_accept_everything(self, rng):
        lm = make_lm(6, 1, 0.5, seed=0)
        for _ in range(50):
            spec = draft(lm, [0], 4, Standard(), rng)
            result = verify(lm, [0], spec, rng)
            assert result.outcome.k == 4
            assert len(result.emitted) == 5

    def test_emitted_matches_outcome(self, small_pair, rng):
        for _ in range(200):
            spec = draft(small_pair.draft, [2], 3, Standard(), rng)
            result = verify(small_pair.target, [2], spec, rng)
            k, bonus = result.outcome
            assert result.emitted == spec.tokens[:k] + (bonus,)

    def test_disjoint_support_rejects_first(self, rng):
        target = SyntheticLM.from_probs([[1.0, 0.0]])
        drafter = SyntheticLM.from_probs([[0.0, 1.0]])
        spec = draft(drafter, [], 2, Standard(), rng)
        result = verify(target, [], spec, rng)
        assert result.outcome == (0, 0)

    def test_uniform_backup(self, rng):
        spec = draft_uniform(5, 3, rng)
        assert spec.origin == Origin.BACKUP
        np.testing.assert_allclose(spec.draft_dists, 0.2)

    def test_saguaro_draft_when_top_f_holds_all_mass(self, rng):
        lm = SyntheticLM.from_probs([[0.0, 1.0, 0.0, 0.0]])
        spec = draft(lm, [], 2, Saguaro(1, 0.0), rng)
        assert spec.tokens == (1, 1)
        np.testing.assert_array_equal(spec.draft_dists, [[0.0, 1.0, 0.0, 0.0]] * 2)

    def test_per_token_acceptance(self, rng):
        target = SyntheticLM.from_probs([[0.1, 0.2, 0.3, 0.4]])
        drafter = SyntheticLM.from_probs([[0.4, 0.3, 0.2, 0.1]])
        drafted, accepted = [], []
        for _ in range(100000):
            spec = draft(drafter, [], 1, Standard(), rng)
            drafted.append(spec.tokens[0])
            accepted.append(verify(target, [], spec, rng).outcome.k == 1)
        drafted, accepted = np.array(drafted), np.array(accepted)
        for x, a in enumerate([0.25, 2 / 3, 1.0, 1.0]):
            n = (drafted == x).sum()
            sigma = np.sqrt(a * (1 - a) / n)
            assert abs(accepted[drafted == x].mean() - a) <= 4 * sigma + 1e-12

    def test_construction_bonus_after_rejection(self, construction_pair, rng):
        bonuses = []
        for _ in range(50000):
            spec = draft(construction_pair.draft, [], 1, Standard(), rng)
            outcome = verify(construction_pair.target, [], spec, rng).outcome
            if outcome.k == 0:
                bonuses.append(outcome.bonus)
        bonuses = np.array(bonuses)
        assert set(bonuses) <= {2, 3}
        n = len(bonuses)
        assert abs((bonuses == 2).mean() - 0.5) <= 4 * np.sqrt(0.25 / n)

    def test_speculation_shape_check(self):
        with pytest.raises(RuntimeError):
            Speculation([0, 1], np.full((3, 2), 0.5))


class TestExactOracle:
    @pytest.mark.parametrize(
        "scheme", [Standard(), Saguaro(2, 0.2), Saguaro(2, 0.5), Saguaro(2, 1.0)]
    )
    def test_lossless_exact(self, scheme):
        pair = mixed_pair(6, 1, 0.4, seed=11)
        for ctx in pair.target.contexts():
            assert exact_lossless_tv(pair.target, pair.draft, list(ctx), 3, scheme) < 1e-10

    def test_round_distribution_sums_to_one(self, small_pair):
        dist = exact_round_distribution(small_pair.target, small_pair.draft, [1], 2, Standard())
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
        assert all(1 <= len(seq) <= 3 for seq in dist)

    def test_construction_round_distribution(self, construction_pair):
        dist = exact_round_distribution(construction_pair.target, construction_pair.draft, [], 1, Standard())
        assert dist[(2,)] == pytest.approx(0.01, abs=1e-12)
        assert dist[(3,)] == pytest.approx(0.01, abs=1e-12)
        assert (0,) not in dist and (1,) not in dist
        p_t = np.array(TARGET_4)
        accepted = np.minimum(p_t, DRAFT_4)
        assert sum(w for seq, w in dist.items() if len(seq) == 2) == pytest.approx(0.98, abs=1e-12)
        for (x, y), w in ((seq, w) for seq, w in dist.items() if len(seq) == 2):
            assert w == pytest.approx(accepted[x] * p_t[y], abs=1e-12)

    def test_too_large(self):
        lm = make_lm(40, 0, 1.0, seed=0)
        with pytest.raises(TooLarge):
            exact_round_distribution(lm, lm, [], 2, Standard())

    def test_corrupted_rule_detected(self, monkeypatch):
        pair = mixed_pair(6, 1, 0.4, seed=11)
        monkeypatch.setattr(specdec, "accept_probability", lambda p_t, p_d: 1.0)
        assert exact_lossless_tv(pair.target, pair.draft, [0], 2, Standard()) > 1e-3


class TestExpectedTokens:
    def test_formula(self):
        assert expected_tokens(0.5, 3) == pytest.approx(1.875)

    def test_alpha_one(self):
        assert expected_tokens(1.0, 4) == 5.0

    def test_alpha_zero(self):
        assert expected_tokens(0.0, 4) == 1.0

    def test_matches_simulation(self, small_pair, rng):
        emitted = []
        for _ in range(20000):
            spec = draft(small_pair.draft, [0], 3, Standard(), rng)
            emitted.append(len(verify(small_pair.target, [0], spec, rng).emitted))
        # per-context acceptance varies along the path, so only a loose check
        assert 1.0 < np.mean(emitted) < 4.0

    def test_bad_alpha(self):
        with pytest.raises(RuntimeError):
            expected_tokens(1.5, 2)
