"""Loss function tests: fixtures are recomputed here with direct formulas
(independent of the stabilized implementation paths) before being asserted."""

import math

import numpy as np
import pytest

from recon.errors import ConfigError
from recon.loss import (
    LossConfig,
    ScoredGroup,
    batch_relevance_loss,
    info_nce,
    relevance_loss,
    relevance_weights,
    uniform_loss,
)


def _group(pos, negs, weight_scores=None):
    pos = np.asarray(pos, dtype=float)
    negs = np.asarray(negs, dtype=float)
    if weight_scores is None:
        weight_scores = pos
    return ScoredGroup(pos, negs, np.asarray(weight_scores, dtype=float))


class TestInfoNce:
    def test_uniform_scores_give_log_count(self):
        """pos == all negs collapses to log(D + 1) for any temperature."""
        for tau in (0.05, 0.5, 1.0, 7.0):
            assert info_nce(0.3, [0.3, 0.3, 0.3], tau) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_positive(self):
        assert info_nce(20.0, [0.0, 0.1, -0.3], 1.0) < 1e-7

    def test_hand_computed_value(self):
        # Direct unstabilized form: log(1 + e^{-0.5} + e^{-0.8}).
        expected = math.log(1.0 + math.exp(-0.5) + math.exp(-0.8))
        assert info_nce(1.0, [0.5, 0.2], 1.0) == pytest.approx(expected, abs=1e-12)
        assert info_nce(1.0, [0.5, 0.2], 1.0) == pytest.approx(0.7206940689146, abs=1e-9)

    def test_shift_invariance(self, rng):
        """Adding a constant to every score must not change the loss."""
        for _ in range(200):
            D = int(rng.integers(1, 8))
            pos = float(rng.normal())
            negs = rng.normal(size=D)
            tau = float(rng.uniform(0.05, 2.0))
            shift = float(rng.uniform(-50, 50))
            base = info_nce(pos, negs, tau)
            shifted = info_nce(pos + shift, negs + shift, tau)
            assert shifted == pytest.approx(base, abs=1e-12)

    def test_non_negative_and_finite(self, rng):
        for _ in range(200):
            value = info_nce(float(rng.normal()), rng.normal(size=4), float(rng.uniform(0.05, 2)))
            assert value >= 0.0
            assert math.isfinite(value)

    def test_extreme_scores_stay_finite(self):
        assert math.isfinite(info_nce(-600.0, [600.0, 500.0], 0.05))

    def test_empty_negatives_give_zero(self):
        assert info_nce(0.7, [], 1.0) == 0.0

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            info_nce(1.0, [0.0], 0.0)
        with pytest.raises(ConfigError):
            info_nce(float("nan"), [0.0], 1.0)


class TestRelevanceWeights:
    def test_equal_scores_uniform(self):
        np.testing.assert_allclose(
            relevance_weights([0.3, 0.3, 0.3, 0.3], 1e-6), [0.25] * 4
        )

    def test_direct_normalization(self):
        np.testing.assert_allclose(relevance_weights([2.0, 1.0, 1.0], 1e-6), [0.5, 0.25, 0.25])

    def test_clamped_negative_score(self):
        # clamp(-0.1) = 1e-6, then normalize by 0.4 + 1e-6 + 0.3.
        scores = np.array([0.4, -0.1, 0.3])
        clamped = np.maximum(scores, 1e-6)
        expected = clamped / clamped.sum()
        got = relevance_weights(scores, 1e-6)
        np.testing.assert_allclose(got, expected, rtol=0, atol=0)
        assert got[0] == pytest.approx(0.571428, abs=1e-6)
        assert got[1] == pytest.approx(1.42857e-6, rel=1e-4)

    def test_sum_to_one(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 9))
            w = relevance_weights(rng.normal(size=n), 1e-6)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(w > 0)

    def test_scale_covariance(self, rng):
        """Scaling all scores by a positive constant leaves weights unchanged."""
        for _ in range(200):
            n = int(rng.integers(1, 7))
            scores = rng.uniform(0.01, 1.0, size=n)
            scale = float(rng.uniform(0.1, 100.0))
            np.testing.assert_allclose(
                relevance_weights(scores, 1e-6),
                relevance_weights(scores * scale, 1e-6),
                atol=1e-12,
            )

    def test_all_clamped_collapse_to_uniform(self):
        np.testing.assert_allclose(relevance_weights([-1.0, -2.0, -3.0], 1e-6), [1 / 3] * 3)


class TestRelevanceLoss:
    def test_single_pair_equals_uniform(self, rng):
        """n = 1: the weight is exactly 1, so both reductions coincide."""
        groups = [
            _group([float(rng.normal())], rng.normal(size=(1, 5))) for _ in range(4)
        ]
        cfg = LossConfig(tau=0.7, mode="relevance_doc")
        assert relevance_loss(groups, cfg) == uniform_loss(groups, cfg)

    def test_equal_weight_scores_equal_uniform(self, rng):
        groups = []
        for _ in range(3):
            pos = rng.normal(size=4)
            groups.append(_group(pos, rng.normal(size=(4, 6)), weight_scores=[0.4] * 4))
        cfg = LossConfig(tau=0.3, mode="relevance_doc")
        assert relevance_loss(groups, cfg) == pytest.approx(uniform_loss(groups, cfg), abs=1e-12)

    def test_hand_computed_combination(self):
        """InfoNCE values [1, 3] with weight scores [3, 1] combine to 1.5."""
        z1 = math.log(math.exp(1.0) - 1.0)  # info_nce(0, [z1], 1) == 1
        z2 = math.log(math.exp(3.0) - 1.0)
        group = _group([0.0, 0.0], [[z1], [z2]], weight_scores=[3.0, 1.0])
        cfg = LossConfig(tau=1.0, mode="relevance_doc")
        assert relevance_loss([group], cfg) == pytest.approx(0.75 * 1.0 + 0.25 * 3.0, abs=1e-12)

    def test_pair_permutation_invariance(self, rng):
        pos = rng.normal(size=5)
        negs = rng.normal(size=(5, 4))
        wts = rng.uniform(0.1, 1.0, size=5)
        perm = rng.permutation(5)
        cfg = LossConfig(mode="relevance_doc")
        a = relevance_loss([_group(pos, negs, wts)], cfg)
        b = relevance_loss([_group(pos[perm], negs[perm], wts[perm])], cfg)
        assert a == pytest.approx(b, abs=1e-12)

    def test_mixed_group_sizes_rejected(self):
        g1 = _group([0.1], [[0.0]])
        g2 = _group([0.1, 0.2], [[0.0], [0.0]])
        with pytest.raises(ConfigError, match="mixed"):
            relevance_loss([g1, g2], LossConfig(mode="relevance_doc"))

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError):
            relevance_loss([], LossConfig(mode="relevance_doc"))


class TestBatchRelevanceLoss:
    def test_equal_scores_give_mean(self, rng):
        pos = rng.normal(size=6)
        negs = rng.normal(size=(6, 3))
        cfg = LossConfig(mode="relevance_batch")
        got = batch_relevance_loss(pos, negs, np.full(6, 0.5), cfg)
        expected = np.mean([info_nce(pos[i], negs[i], cfg.tau) for i in range(6)])
        assert got == pytest.approx(expected, abs=1e-12)

    def test_two_pair_fixtures(self):
        z1 = math.log(math.exp(1.0) - 1.0)
        z2 = math.log(math.exp(3.0) - 1.0)
        cfg = LossConfig(tau=1.0, mode="relevance_batch")
        even = batch_relevance_loss([0.0, 0.0], [[z1], [z2]], [1.0, 1.0], cfg)
        assert even == pytest.approx(2.0, abs=1e-12)
        skewed = batch_relevance_loss([0.0, 0.0], [[z1], [z2]], [3.0, 1.0], cfg)
        assert skewed == pytest.approx(1.5, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError):
            batch_relevance_loss([], np.empty((0, 1)), [], LossConfig(mode="relevance_batch"))


class TestLossConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(tau=-1.0)
        with pytest.raises(ConfigError):
            LossConfig(mode="softmax")
        with pytest.raises(ConfigError):
            LossConfig(weight_floor=0.1)
