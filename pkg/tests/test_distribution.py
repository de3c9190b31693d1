"""Tests for next-token distributions, tempering, top-k restriction and sampling"""

import numpy as np
import pytest

from app.core.errors import DegenerateDistribution, InvariantViolation
from app.services.distribution import (
    NextTokenDistribution,
    kl_divergence,
    restrict_top_k,
    sample_token,
    temper_probs,
    tempered_softmax,
)


class TestNextTokenDistribution:
    """Test construction and validation"""

    def test_dense_validates(self):
        dist = NextTokenDistribution.from_dense([0.2, 0.3, 0.5]).validate()
        assert dist.dense
        assert dist.tail_mass == 0.0
        assert dist.prob_of(2) == pytest.approx(0.5)

    def test_sum_must_be_one(self):
        with pytest.raises(InvariantViolation, match="sums to"):
            NextTokenDistribution.from_dense([0.2, 0.3, 0.4]).validate()

    def test_sparse_with_tail(self):
        dist = NextTokenDistribution.from_sparse([2, 0], [0.5, 0.3], 0.2, 4).validate()
        assert not dist.dense
        assert dist.prob_of(2) == pytest.approx(0.5)
        assert dist.prob_of(1) == 0.0

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvariantViolation, match="distinct"):
            NextTokenDistribution.from_sparse([1, 1], [0.5, 0.5], 0.0, 3).validate()

    def test_ids_must_be_in_vocabulary(self):
        with pytest.raises(InvariantViolation, match="outside vocabulary"):
            NextTokenDistribution.from_sparse([3], [1.0], 0.0, 3).validate()

    def test_to_dense_refuses_tail_mass(self):
        dist = NextTokenDistribution.from_sparse([0], [0.6], 0.4, 3)
        with pytest.raises(InvariantViolation):
            dist.to_dense()

    def test_support_dense_renormalizes(self):
        dist = NextTokenDistribution.from_sparse([2, 0], [0.3, 0.1], 0.6, 3)
        np.testing.assert_allclose(dist.support_dense(), [0.25, 0.0, 0.75])


class TestTempering:
    """Test temperature handling"""

    def test_unit_temperature_is_softmax(self):
        probs = tempered_softmax([0.0, np.log(3.0)])
        np.testing.assert_allclose(probs, [0.25, 0.75])

    def test_low_temperature_sharpens(self):
        base = np.array([0.2, 0.8])
        sharp = temper_probs(base, 0.5)
        # p^(1/T) normalized: 0.04 / 0.68, 0.64 / 0.68
        np.testing.assert_allclose(sharp, [0.04 / 0.68, 0.64 / 0.68])

    def test_zero_probabilities_stay_zero(self):
        out = temper_probs([0.0, 0.5, 0.5], 0.7)
        assert out[0] == 0.0
        assert out.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_lower_temperature_never_flattens(self, seed):
        logits = np.random.default_rng(seed).normal(size=8)
        rows = [tempered_softmax(logits, t) for t in (4.0, 2.0, 1.0, 0.7, 0.5, 0.25)]
        peaks = [float(row.max()) for row in rows]
        entropies = [float(-(row * np.log(row)).sum()) for row in rows]
        assert all(colder >= warmer - 1e-12 for warmer, colder in zip(peaks, peaks[1:]))
        assert all(colder <= warmer + 1e-12 for warmer, colder in zip(entropies, entropies[1:]))
        assert all(int(row.argmax()) == int(np.argmax(logits)) for row in rows)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(InvariantViolation):
            tempered_softmax([0.0, 1.0], 0.0)


class TestRestrictTopK:
    """Test top-k ranking and tie breaking"""

    def test_keeps_most_probable_in_order(self):
        top = restrict_top_k(NextTokenDistribution.from_dense([0.1, 0.5, 0.15, 0.25]), 2)
        assert top.token_ids.tolist() == [1, 3]
        assert top.tail_mass == pytest.approx(0.25)

    def test_ties_break_by_smaller_id(self):
        top = restrict_top_k(NextTokenDistribution.from_dense([0.25, 0.25, 0.25, 0.25]), 3)
        assert top.token_ids.tolist() == [0, 1, 2]

    def test_k_equal_vocab_has_no_tail(self):
        top = restrict_top_k(NextTokenDistribution.from_dense([0.3, 0.7]), 2)
        assert top.tail_mass == pytest.approx(0.0)

    def test_k_out_of_range(self):
        with pytest.raises(InvariantViolation):
            restrict_top_k(NextTokenDistribution.from_dense([0.3, 0.7]), 3)


class TestSampling:
    """Test seeded sampling"""

    def test_same_seed_same_token(self):
        dist = NextTokenDistribution.from_dense([0.2, 0.3, 0.5])
        a = [sample_token(dist, np.random.default_rng(11)) for _ in range(5)]
        b = [sample_token(dist, np.random.default_rng(11)) for _ in range(5)]
        assert a == b

    def test_point_mass_always_sampled(self):
        dist = NextTokenDistribution.from_dense([0.0, 1.0, 0.0])
        rng = np.random.default_rng(0)
        assert {sample_token(dist, rng) for _ in range(50)} == {1}

    def test_tail_is_never_sampled(self):
        dist = NextTokenDistribution.from_sparse([2], [0.1], 0.9, 3)
        rng = np.random.default_rng(0)
        assert {sample_token(dist, rng) for _ in range(50)} == {2}

    def test_frequencies_follow_probabilities(self):
        dist = NextTokenDistribution.from_dense([0.2, 0.8])
        rng = np.random.default_rng(3)
        draws = [sample_token(dist, rng) for _ in range(4000)]
        assert abs(np.mean(draws) - 0.8) < 0.03

    def test_nan_is_degenerate(self):
        dist = NextTokenDistribution.from_dense([np.nan, 0.5])
        with pytest.raises(DegenerateDistribution):
            sample_token(dist, np.random.default_rng(0))

    def test_zero_mass_is_degenerate(self):
        dist = NextTokenDistribution.from_sparse([0], [0.0], 1.0, 2)
        with pytest.raises(DegenerateDistribution):
            sample_token(dist, np.random.default_rng(0))


class TestKlDivergence:
    """Test KL between full rows"""

    def test_identical_rows(self):
        p = np.array([0.5, 0.5])
        assert kl_divergence(p, p) == pytest.approx(0.0)

    def test_known_value(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.5, 0.5])
        assert kl_divergence(p, q) == pytest.approx(np.log(2.0))

    def test_missing_support_is_infinite(self):
        assert kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == float("inf")
