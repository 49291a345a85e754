"""Score refinement: alignment, head fusion, and upsampling composition."""

import numpy as np
import pytest

from hierseg.compensation import (
    align_scores,
    compensate,
    fuse_heads,
    upsample_scores,
)
from hierseg.diffusion import attention_from_maps
from hierseg.errors import ValidationError
from hierseg.interp import bilinear_resize
from hierseg.scoring import CategorySet, ScoreMap, assign_labels


def make_score_map(scores):
    scores = np.asarray(scores, dtype=np.float32)
    cats = CategorySet.from_names([f"c{i}" for i in range(scores.shape[2])])
    return ScoreMap(scores, cats)


def identity_attention(side, heads=1):
    tokens = side * side
    return attention_from_maps(np.stack([np.eye(tokens)] * heads))


def uniform_attention(side, heads=2):
    tokens = side * side
    return attention_from_maps(np.full((heads, tokens, tokens), 1.0 / tokens))


def random_attention(rng, side, heads):
    tokens = side * side
    x = rng.random((heads, tokens, tokens)) + 1e-3
    return attention_from_maps(x / x.sum(axis=2, keepdims=True))


class TestAlignScores:
    def test_matching_grid_only_flattens(self):
        rng = np.random.default_rng(0)
        smap = make_score_map(rng.standard_normal((4, 4, 3)))
        out = align_scores(smap, 4)
        np.testing.assert_array_equal(out, smap.flattened())

    def test_constant_channel_survives_resampling(self):
        smap = make_score_map(np.full((3, 5, 2), 1.25))
        out = align_scores(smap, 8)
        np.testing.assert_allclose(out, 1.25, atol=1e-6)

    def test_2x2_to_4x4_hand_values(self):
        corner = np.zeros((2, 2, 1), dtype=np.float32)
        corner[:, :, 0] = [[0.0, 1.0], [2.0, 3.0]]
        smap = make_score_map(corner)
        out = align_scores(smap, 4).reshape(4, 4)
        w = np.array([0.0, 0.25, 0.75, 1.0])
        expected = w[None, :] * 1.0 + w[:, None] * 2.0
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_bad_target_rejected(self):
        smap = make_score_map(np.zeros((2, 2, 1), dtype=np.float32))
        with pytest.raises(ValidationError):
            align_scores(smap, 0)


class TestFuseHeads:
    def test_single_head_passthrough(self):
        rng = np.random.default_rng(1)
        att = random_attention(rng, side=2, heads=1)
        fused = fuse_heads(att)
        np.testing.assert_array_equal(fused.data, att.stack.maps[0].data)

    def test_renormalize_makes_rows_exact(self):
        rng = np.random.default_rng(2)
        att = random_attention(rng, side=3, heads=4)
        fused = fuse_heads(att, renormalize=True)
        np.testing.assert_allclose(fused.data.sum(axis=1), 1.0, atol=1e-12)

    def test_mean_strategy_averages_heads(self):
        rng = np.random.default_rng(12)
        att = random_attention(rng, side=3, heads=4)
        fused = fuse_heads(att, strategy="mean")
        np.testing.assert_allclose(fused.data,
                                   att.stack.as_array().mean(axis=0), atol=1e-12)

    def test_single_strategy_picks_requested_head(self):
        rng = np.random.default_rng(13)
        att = random_attention(rng, side=2, heads=3)
        fused = fuse_heads(att, strategy="single", single_head=2)
        np.testing.assert_array_equal(fused.data, att.stack.maps[2].data)
        with pytest.raises(ValidationError):
            fuse_heads(att, strategy="single", single_head=3)

    def test_unknown_strategy_rejected(self):
        from hierseg.errors import ConfigurationError
        rng = np.random.default_rng(14)
        att = random_attention(rng, side=2, heads=2)
        with pytest.raises(ConfigurationError):
            fuse_heads(att, strategy="max")

    def test_strategies_differ_on_random_heads(self):
        rng = np.random.default_rng(15)
        att = random_attention(rng, side=3, heads=3)
        mult = fuse_heads(att, strategy="multiplication").data
        mean = fuse_heads(att, strategy="mean").data
        assert not np.allclose(mult, mean)


class TestCompensate:
    def test_identity_head_is_pure_upsampling(self):
        rng = np.random.default_rng(3)
        smap = make_score_map(rng.standard_normal((4, 4, 3)))
        att = identity_attention(side=4)
        result = compensate(smap, att, out_hw=(16, 16))

        np.testing.assert_array_equal(result.refined.scores, smap.scores)
        expected = bilinear_resize(smap.scores, 16, 16).astype(np.float32)
        np.testing.assert_array_equal(result.final.scores, expected)

    def test_identity_head_with_alignment_equals_aligned_scores(self):
        rng = np.random.default_rng(4)
        smap = make_score_map(rng.standard_normal((3, 5, 2)))
        att = identity_attention(side=8)
        result = compensate(smap, att, out_hw=(8, 8))
        aligned = align_scores(smap, 8).reshape(8, 8, 2).astype(np.float32)
        np.testing.assert_array_equal(result.refined.scores, aligned)
        np.testing.assert_allclose(result.final.scores, aligned, atol=1e-6)

    def test_uniform_heads_give_global_mean_everywhere(self):
        rng = np.random.default_rng(5)
        smap = make_score_map(rng.standard_normal((4, 4, 3)))
        att = uniform_attention(side=4, heads=3)
        result = compensate(smap, att, out_hw=(4, 4))
        mean_vec = smap.flattened().mean(axis=0)
        expected = np.tile(mean_vec, (4, 4, 1)).astype(np.float32)
        np.testing.assert_allclose(result.refined.scores, expected, atol=1e-6)
        np.testing.assert_allclose(result.final.scores, expected, atol=1e-6)

    def test_matches_composed_oracles(self):
        rng = np.random.default_rng(6)
        smap = make_score_map(rng.standard_normal((3, 4, 2)))
        att = random_attention(rng, side=5, heads=3)
        result = compensate(smap, att, out_hw=(10, 15))

        aligned = bilinear_resize(smap.scores, 5, 5).reshape(25, 2)
        chain = att.stack.maps[0].data
        for m in att.stack.maps[1:]:
            chain = chain @ m.data
        refined = (chain @ aligned).reshape(5, 5, 2)
        final = bilinear_resize(refined, 10, 15)
        np.testing.assert_allclose(result.refined.scores, refined, atol=1e-5)
        np.testing.assert_allclose(result.final.scores, final, atol=1e-5)

    def test_per_category_ranges_contract(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            smap = make_score_map(rng.standard_normal((4, 4, 3)) * 5)
            att = random_attention(rng, side=6, heads=2)
            result = compensate(smap, att, out_hw=(6, 6))
            aligned = align_scores(smap, 6)
            for c in range(3):
                lo, hi = aligned[:, c].min(), aligned[:, c].max()
                assert result.refined.scores[:, :, c].min() >= lo - 1e-5
                assert result.refined.scores[:, :, c].max() <= hi + 1e-5

    def test_identity_attention_labeling_matches_coarse_labeling(self):
        rng = np.random.default_rng(8)
        smap = make_score_map(rng.standard_normal((4, 4, 3)))
        att = identity_attention(side=4)
        result = compensate(smap, att, out_hw=(4, 4))
        np.testing.assert_array_equal(
            assign_labels(result.final), assign_labels(smap)
        )

    def test_category_permutation_commutes(self):
        rng = np.random.default_rng(9)
        scores = rng.standard_normal((3, 3, 4)).astype(np.float32)
        att = random_attention(rng, side=4, heads=2)
        perm = np.array([2, 0, 3, 1])

        direct = compensate(make_score_map(scores), att, out_hw=(6, 6))
        permuted = compensate(make_score_map(scores[:, :, perm]), att,
                              out_hw=(6, 6))
        np.testing.assert_allclose(permuted.final.scores,
                                   direct.final.scores[:, :, perm], atol=1e-6)

    def test_nearest_mode_available_for_ablation(self):
        rng = np.random.default_rng(10)
        smap = make_score_map(rng.standard_normal((2, 2, 1)))
        att = identity_attention(side=4)
        result = compensate(smap, att, out_hw=(4, 4), mode="nearest")
        assert result.final.scores.shape == (4, 4, 1)


class TestUpsampleScores:
    def test_matches_direct_resize(self):
        rng = np.random.default_rng(11)
        smap = make_score_map(rng.standard_normal((3, 4, 2)))
        out = upsample_scores(smap, (9, 8))
        np.testing.assert_allclose(
            out.scores, bilinear_resize(smap.scores, 9, 8), atol=1e-6
        )
        assert out.categories is smap.categories
