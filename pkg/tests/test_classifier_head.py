import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protohead import (
    ClsNetWeights,
    ProtoheadWarning,
    PrototypeBank,
    RegionFeatures,
    SimilarityMap,
    ValidationError,
    classify,
    preselect_classes,
    prototype_projection,
    rearrange,
    score_proposal,
)

from oracles import conv2d_scalar, projection_scalar, topk_descending


def _bank(cls, bg=None, names=None, normalized=False):
    cls = np.asarray(cls, dtype=np.float64)
    bg = np.zeros((0, cls.shape[1])) if bg is None else np.asarray(bg, dtype=np.float64)
    names = tuple(names or (f"c{i}" for i in range(cls.shape[0])))
    return PrototypeBank(cls, names, bg, normalized=normalized)


def _random_sim(rng, s=4, c=5, b=2):
    return SimilarityMap(rng.standard_normal((s, s, c + b)), c, b)


class TestPrototypeProjection:
    def test_zero_region(self):
        bank = _bank(np.ones((3, 4)))
        sim = prototype_projection(RegionFeatures(np.zeros((2, 2, 4))), bank)
        np.testing.assert_array_equal(sim.data, 0.0)
        assert sim.class_count == 3 and sim.background_count == 0

    def test_basis_prototype_extracts_plane(self):
        rng = np.random.default_rng(0)
        region = RegionFeatures(rng.standard_normal((3, 3, 5)))
        basis = np.zeros((1, 5))
        basis[0, 2] = 1.0
        sim = prototype_projection(region, _bank(basis))
        np.testing.assert_allclose(sim.data[:, :, 0], region.data[:, :, 2], atol=1e-12)

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(1)
        region = RegionFeatures(rng.standard_normal((3, 3, 4)))
        bank = _bank(rng.standard_normal((2, 4)), rng.standard_normal((1, 4)))
        sim = prototype_projection(region, bank)
        want = projection_scalar(region.data, bank.matrix())
        assert np.abs(sim.data - want).max() <= 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError):
            prototype_projection(RegionFeatures(np.zeros((2, 2, 3))), _bank(np.ones((2, 4))))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(min_value=-4.0, max_value=4.0, allow_nan=False))
    def test_scaling_bilinearity(self, alpha):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((3, 3, 4))
        bank = _bank(rng.standard_normal((3, 4)))
        base = prototype_projection(RegionFeatures(feats), bank).data
        scaled = prototype_projection(RegionFeatures(alpha * feats), bank).data
        assert np.abs(scaled - alpha * base).max() <= 1e-5


class TestPreselectClasses:
    def test_k_covers_all_classes(self):
        rng = np.random.default_rng(3)
        region = RegionFeatures(rng.standard_normal((2, 2, 4)))
        bank = _bank(rng.standard_normal((3, 4)))
        got = preselect_classes(region, bank, 99)
        mean = region.data.mean(axis=(0, 1))
        scores = bank.class_prototypes.astype(np.float64) @ mean
        assert got == topk_descending(list(scores), 3)

    def test_self_match_ranks_first(self):
        protos = np.eye(3, 6)
        region = RegionFeatures(np.tile(protos[2], (2, 2, 1)))
        assert preselect_classes(region, _bank(protos), 1) == [2]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            region = RegionFeatures(rng.standard_normal((2, 2, 5)))
            bank = _bank(rng.standard_normal((5, 5)))
            mean = region.data.mean(axis=(0, 1))
            scores = list(bank.class_prototypes.astype(np.float64) @ mean)
            assert preselect_classes(region, bank, 3) == topk_descending(scores, 3)

    def test_positive_rescale_invariance(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((2, 2, 4))
        bank = _bank(rng.standard_normal((4, 4)))
        base = preselect_classes(RegionFeatures(feats), bank, 2)
        assert preselect_classes(RegionFeatures(3.7 * feats), bank, 2) == base

    def test_backgrounds_never_selected(self):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((2, 2, 4))
        cls = rng.standard_normal((3, 4))
        plain = _bank(cls)
        with_bg = _bank(cls, 10.0 * np.ones((2, 4)))
        assert (
            preselect_classes(RegionFeatures(feats), plain, 3)
            == preselect_classes(RegionFeatures(feats), with_bg, 3)
        )

    def test_tie_breaks_to_lower_index(self):
        protos = np.stack([np.ones(3), np.ones(3), -np.ones(3)])
        region = RegionFeatures(np.ones((2, 2, 3)))
        assert preselect_classes(region, _bank(protos), 2) == [0, 1]

    def test_bad_k(self):
        with pytest.raises(ValidationError):
            preselect_classes(RegionFeatures(np.ones((2, 2, 3))), _bank(np.ones((1, 3))), 0)


class TestRearrange:
    def test_exact_width_is_plain_sort(self):
        rng = np.random.default_rng(7)
        sim = _random_sim(rng, s=3, c=5, b=1)
        out = rearrange(sim, 2, 4)
        others = np.delete(sim.data[:, :, :5], 2, axis=2)
        np.testing.assert_array_equal(out.data[:, :, 1:5], -np.sort(-others, axis=2))

    def test_hand_upsample(self):
        # one cell, non-target channels [0.2, 0.9, 0.5], widened to 5
        data = np.array([[[7.0, 0.2, 0.9, 0.5]]])
        sim = SimilarityMap(data, 4, 0)
        out = rearrange(sim, 0, 5)
        np.testing.assert_allclose(out.data[0, 0], [7.0, 0.9, 0.7, 0.5, 0.35, 0.2], atol=1e-12)

    def test_truncation_keeps_top_values(self):
        rng = np.random.default_rng(8)
        sim = _random_sim(rng, s=2, c=11, b=0)
        out = rearrange(sim, 3, 4)
        others = np.delete(sim.data, 3, axis=2)
        ordered = -np.sort(-others, axis=2)
        np.testing.assert_array_equal(out.data[:, :, 1:5], ordered[:, :, :4])

    def test_single_class_zero_fill(self):
        sim = SimilarityMap(np.ones((2, 2, 3)), 1, 2)
        with pytest.warns(ProtoheadWarning):
            out = rearrange(sim, 0, 4)
        assert out.channels == 1 + 4 + 2
        np.testing.assert_array_equal(out.data[:, :, 1:5], 0.0)

    def test_structure_properties(self):
        rng = np.random.default_rng(9)
        for c, b, t in [(2, 0, 2), (4, 3, 7), (6, 1, 3), (9, 2, 128)]:
            sim = _random_sim(rng, s=3, c=c, b=b)
            target = int(rng.integers(c))
            out = rearrange(sim, target, t)
            assert out.data.shape == (3, 3, 1 + t + b)
            np.testing.assert_array_equal(out.data[:, :, 0], sim.data[:, :, target])
            if b:
                np.testing.assert_array_equal(out.data[:, :, 1 + t :], sim.data[:, :, c:])
            block = out.data[:, :, 1 : 1 + t]
            assert np.all(np.diff(block, axis=2) <= 1e-12)

    def test_bad_args(self):
        sim = SimilarityMap(np.ones((2, 2, 3)), 3, 0)
        with pytest.raises(ValidationError):
            rearrange(sim, 3, 4)
        with pytest.raises(ValidationError):
            rearrange(sim, 0, 0)


class TestClassify:
    def test_zero_network_scores_half(self):
        cmap = rearrange(SimilarityMap(np.zeros((4, 4, 4)), 2, 2), 0, 1)
        weights = ClsNetWeights.zeros(in_channels=4, block_count=2, width=3)
        assert classify(cmap, weights) == pytest.approx(0.5)

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        cmap = rearrange(SimilarityMap(rng.standard_normal((4, 4, 5)), 3, 2), 1, 2)
        w1 = ClsNetWeights.seeded(5, block_count=2, width=6, seed=42)
        w2 = ClsNetWeights.seeded(5, block_count=2, width=6, seed=42)
        assert classify(cmap, w1) == classify(cmap, w2)

    def _forward_oracle(self, x, weights):
        for k, b, ak, ab in zip(
            weights.conv_kernels, weights.conv_biases, weights.attn_kernels, weights.attn_biases
        ):
            x = np.maximum(conv2d_scalar(x, k, b), 0.0)
            gate = 1.0 / (1.0 + np.exp(-conv2d_scalar(x, ak, ab)))
            x = x * gate
        logit = x.mean(axis=(0, 1)) @ weights.head_weight + weights.head_bias
        return 1.0 / (1.0 + np.exp(-logit))

    def test_center_only_kernels_against_oracle(self):
        # 3x3 kernels whose only nonzero tap is the center (1x1-equivalent)
        rng = np.random.default_rng(11)
        k = np.zeros((3, 2, 3, 3))
        k[:, :, 1, 1] = rng.standard_normal((3, 2))
        weights = ClsNetWeights(
            (k,), (rng.standard_normal(3),),
            (rng.standard_normal((1, 3, 1, 1)),), (rng.standard_normal(1),),
            rng.standard_normal(3), 0.3,
        )
        x = rng.standard_normal((2, 2, 2))
        cmap = rearrange(SimilarityMap(x, 2, 0), 0, 1)
        assert abs(classify(cmap, weights) - self._forward_oracle(cmap.data, weights)) <= 1e-6

    def test_full_random_net_against_oracle(self):
        rng = np.random.default_rng(12)
        weights = ClsNetWeights.seeded(4, block_count=2, width=3, seed=7)
        cmap = rearrange(SimilarityMap(rng.standard_normal((3, 3, 4)), 2, 2), 1, 1)
        assert abs(classify(cmap, weights) - self._forward_oracle(cmap.data, weights)) <= 1e-6

    def test_score_in_open_interval(self):
        rng = np.random.default_rng(13)
        weights = ClsNetWeights.seeded(3, block_count=1, width=4, seed=1)
        for _ in range(10):
            cmap = rearrange(SimilarityMap(10 * rng.standard_normal((3, 3, 3)), 2, 1), 0, 1)
            assert 0.0 < classify(cmap, weights) < 1.0

    def test_channel_mismatch(self):
        cmap = rearrange(SimilarityMap(np.zeros((2, 2, 3)), 3, 0), 0, 4)
        with pytest.raises(ValidationError):
            classify(cmap, ClsNetWeights.zeros(in_channels=9))

    def test_overflowing_activations_raise(self):
        from protohead import NumericalError

        huge = 1e200
        weights = ClsNetWeights(
            (np.full((2, 2, 3, 3), huge), np.full((2, 2, 3, 3), huge)),
            (np.zeros(2), np.zeros(2)),
            (np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 1, 1))),
            (np.full(1, 10.0), np.full(1, 10.0)),
            np.full(2, huge), 0.0,
        )
        cmap = rearrange(SimilarityMap(np.full((2, 2, 3), huge), 3, 0), 0, 1)
        with pytest.raises(NumericalError):
            classify(cmap, weights)


class TestScoreProposal:
    def _setup(self, rng, c=5, b=1):
        region = RegionFeatures(rng.standard_normal((3, 3, 4)))
        bank = _bank(rng.standard_normal((c, 4)), rng.standard_normal((b, 4)))
        return region, bank

    def test_k_one_single_support(self):
        rng = np.random.default_rng(14)
        region, bank = self._setup(rng)
        weights = ClsNetWeights.seeded(1 + 2 + 1, block_count=1, width=4)
        scores = score_proposal(region, bank, 1, 2, weights)
        assert np.count_nonzero(scores) == 1

    def test_k_covers_all(self):
        rng = np.random.default_rng(15)
        region, bank = self._setup(rng)
        weights = ClsNetWeights.seeded(1 + 2 + 1, block_count=1, width=4)
        scores = score_proposal(region, bank, 5, 2, weights)
        assert np.count_nonzero(scores) == 5

    def test_support_matches_preselect(self):
        rng = np.random.default_rng(16)
        region, bank = self._setup(rng)
        weights = ClsNetWeights.seeded(1 + 2 + 1, block_count=1, width=4)
        scores = score_proposal(region, bank, 3, 2, weights)
        assert sorted(np.flatnonzero(scores)) == sorted(preselect_classes(region, bank, 3))


class TestWeightsIO:
    def test_save_load_round_trip(self, tmp_path):
        weights = ClsNetWeights.seeded(6, block_count=2, width=5, seed=3)
        path = tmp_path / "c.phw1"
        weights.save(path)
        back = ClsNetWeights.load(path)
        assert back.block_count == 2 and back.in_channels == 6
        for a, b in zip(back.conv_kernels, weights.conv_kernels):
            np.testing.assert_array_equal(a, b.astype(np.float32))
        np.testing.assert_array_equal(back.head_weight, weights.head_weight.astype(np.float32))

    def test_wrong_branch_rejected(self, tmp_path):
        from protohead import IntegralParams, LocNetWeights, save_loc_weights

        path = tmp_path / "l.phw1"
        save_loc_weights(path, LocNetWeights.zeros(4), IntegralParams.uniform(8))
        with pytest.raises(ValidationError):
            ClsNetWeights.load(path)

    def test_chain_validation(self):
        with pytest.raises(ValidationError):
            ClsNetWeights(
                (np.zeros((4, 3, 3, 3)), np.zeros((4, 5, 3, 3))),
                (np.zeros(4), np.zeros(4)),
                (np.zeros((1, 4, 1, 1)), np.zeros((1, 4, 1, 1))),
                (np.zeros(1), np.zeros(1)),
                np.zeros(4), 0.0,
            )
