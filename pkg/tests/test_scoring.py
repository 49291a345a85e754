"""Category embedding, similarity scoring, and label assignment."""

import numpy as np
import pytest

from hierseg.errors import ConfigurationError, ShapeError, ValidationError
from hierseg.fusion import FusedOutputs
from hierseg.scoring import (
    CategorySet,
    ScoreMap,
    TextEmbeddings,
    assign_labels,
    embed_categories,
    similarity_scores,
)


class StubTextEncoder:
    """Deterministic fake encoder: one fixed vector per prompt string."""

    def __init__(self, dim=6):
        self.dim = dim

    def encode(self, prompts):
        out = np.empty((len(prompts), self.dim))
        for i, p in enumerate(prompts):
            rng = np.random.default_rng(abs(hash(p)) % (2**32))
            out[i] = rng.standard_normal(self.dim)
        return out


class TestCategorySet:
    def test_from_file_with_synonyms_and_background(self, tmp_path):
        p = tmp_path / "classes.txt"
        p.write_text(
            "# a comment\n"
            "!background, wall, floor\n"
            "cat\n"
            "dog, puppy\n"
            "\n"
            "sky\n"
        )
        cats = CategorySet.from_file(p)
        assert cats.names == ("cat", "dog", "sky")
        assert cats.synonyms[1] == ("dog", "puppy")
        assert cats.background == ("background", "wall", "floor")
        assert cats.includes_background

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValidationError):
            CategorySet.from_names(["cat", "cat"])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            CategorySet.from_names([])

    def test_two_background_lines_rejected(self, tmp_path):
        p = tmp_path / "classes.txt"
        p.write_text("!background\n!void\ncat\n")
        with pytest.raises(ValidationError):
            CategorySet.from_file(p)

    def test_restricted_preserves_order_and_background(self):
        cats = CategorySet.from_names(["cat", "dog", "sky"],
                                      background=["background"])
        sub = cats.restricted({"sky", "cat"})
        assert sub.names == ("cat", "sky")
        assert sub.background == ("background",)
        with pytest.raises(ValidationError):
            cats.restricted({"horse"})


class TestEmbedCategories:
    def test_rows_are_unit_normalized(self):
        cats = CategorySet.from_names(["cat", "dog"], template_set="single")
        emb = embed_categories(cats, StubTextEncoder())
        np.testing.assert_allclose(np.linalg.norm(emb.matrix, axis=1), 1.0,
                                   atol=1e-5)

    def test_two_template_hand_oracle(self):
        # Template averaging: normalize each prompt embedding, average,
        # renormalize. Verified against an explicit computation.
        enc = StubTextEncoder()
        cats = CategorySet(names=("cat",), synonyms=(("cat",),),
                           template_set="single")
        from hierseg import textenc
        emb_single = embed_categories(cats, enc)

        raw = enc.encode(["a photo of a cat."])
        expected = raw[0] / np.linalg.norm(raw[0])
        np.testing.assert_allclose(emb_single.matrix[0], expected, atol=1e-6)

        orig = textenc.TEMPLATE_SETS
        textenc.TEMPLATE_SETS = dict(orig)
        textenc.TEMPLATE_SETS["two"] = ("a photo of a {}.", "a drawing of a {}.")
        try:
            cats2 = CategorySet(names=("cat",), synonyms=(("cat",),),
                                template_set="two")
            emb = embed_categories(cats2, enc)
            a = enc.encode(["a photo of a cat."])[0]
            b = enc.encode(["a drawing of a cat."])[0]
            mean = (a / np.linalg.norm(a) + b / np.linalg.norm(b)) / 2
            expected = mean / np.linalg.norm(mean)
            np.testing.assert_allclose(emb.matrix[0], expected, atol=1e-6)
        finally:
            textenc.TEMPLATE_SETS = orig

    def test_synonyms_pool_into_one_row(self):
        cats = CategorySet(names=("dog",), synonyms=(("dog", "puppy"),),
                           template_set="single")
        emb = embed_categories(cats, StubTextEncoder())
        assert emb.matrix.shape[0] == 1

    def test_background_row_appended_on_request(self):
        cats = CategorySet.from_names(["cat"], background=["background"],
                                      template_set="single")
        emb = embed_categories(cats, StubTextEncoder(), include_background_row=True)
        assert emb.matrix.shape[0] == 2
        assert emb.background_row == 1

    def test_background_row_without_group_rejected(self):
        cats = CategorySet.from_names(["cat"], template_set="single")
        with pytest.raises(ValidationError):
            embed_categories(cats, StubTextEncoder(), include_background_row=True)


def make_text_embeddings(matrix, names=None, background_row=None):
    names = names or [f"c{i}" for i in range(matrix.shape[0] - (background_row is not None))]
    cats = CategorySet.from_names(
        names, background=["background"] if background_row is not None else None
    )
    m = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    return TextEmbeddings(m, cats, background_row)


class TestSimilarityScores:
    def test_identical_vectors_score_one(self):
        rng = np.random.default_rng(0)
        text = make_text_embeddings(rng.standard_normal((2, 5)))
        patch = text.matrix[0][None, :]
        outputs = FusedOutputs(layers=(1,), embeddings=patch[None, :, :],
                               grid=(1, 1))
        smap = similarity_scores(outputs, text)
        assert smap.scores[0, 0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_vectors_score_zero(self):
        m = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        text = make_text_embeddings(m)
        patch = np.array([[[0.0, 0, 2.0]]])
        outputs = FusedOutputs(layers=(1,), embeddings=patch, grid=(1, 1))
        smap = similarity_scores(outputs, text)
        np.testing.assert_allclose(smap.scores[0, 0], [0.0, 0.0], atol=1e-7)

    def test_two_layer_mean_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        text = make_text_embeddings(rng.standard_normal((3, 4)))
        emb = rng.standard_normal((2, 6, 4))
        outputs = FusedOutputs(layers=(1, 2), embeddings=emb, grid=(2, 3))
        smap = similarity_scores(outputs, text)

        oracle = np.zeros((6, 3))
        for layer in range(2):
            for p in range(6):
                v = emb[layer, p]
                v = v / np.sqrt((v * v).sum())
                for c in range(3):
                    oracle[p, c] += float(v @ text.matrix[c]) / 2
        np.testing.assert_allclose(smap.flattened(), oracle, atol=1e-6)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(2)
        text = make_text_embeddings(rng.standard_normal((4, 8)))
        emb = rng.standard_normal((3, 12, 8)) * 10
        outputs = FusedOutputs(layers=(1, 2, 3), embeddings=emb, grid=(3, 4))
        smap = similarity_scores(outputs, text)
        assert smap.scores.min() >= -1.0 - 1e-6
        assert smap.scores.max() <= 1.0 + 1e-6

    def test_layer_average_is_mean_of_per_layer_calls(self):
        rng = np.random.default_rng(3)
        text = make_text_embeddings(rng.standard_normal((2, 4)))
        emb = rng.standard_normal((2, 4, 4))
        both = similarity_scores(
            FusedOutputs(layers=(1, 2), embeddings=emb, grid=(2, 2)), text
        )
        singles = [
            similarity_scores(
                FusedOutputs(layers=(i + 1,), embeddings=emb[i:i + 1], grid=(2, 2)),
                text,
            ).scores
            for i in range(2)
        ]
        np.testing.assert_allclose(both.scores, (singles[0] + singles[1]) / 2,
                                   atol=1e-6)

    def test_width_mismatch_raises(self):
        text = make_text_embeddings(np.eye(2))
        outputs = FusedOutputs(layers=(1,), embeddings=np.ones((1, 4, 3)),
                               grid=(2, 2))
        with pytest.raises(ShapeError):
            similarity_scores(outputs, text)


def score_map(scores, background=False, background_column=None):
    scores = np.asarray(scores, dtype=np.float32)
    c = scores.shape[2] - (1 if background_column is not None else 0)
    cats = CategorySet.from_names(
        [f"c{i}" for i in range(c)],
        background=["background"] if background or background_column is not None else None,
    )
    return ScoreMap(scores, cats, background_column)


class TestAssignLabels:
    def test_single_class_no_background_labels_everything(self):
        smap = score_map(np.random.default_rng(0).standard_normal((3, 3, 1)))
        labels = assign_labels(smap)
        np.testing.assert_array_equal(labels, np.ones((3, 3), dtype=np.int32))

    def test_pure_argmax_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            smap = score_map(rng.standard_normal((4, 5, 3)))
            c = float(rng.uniform(0.01, 50))
            a = assign_labels(smap)
            b = assign_labels(smap.with_scores(smap.scores * c))
            np.testing.assert_array_equal(a, b)

    def test_hand_computed_threshold_grid(self):
        # 2x2 grid, 2 classes, temperature 1: softmax([2, 0]) peaks at
        # 0.881 (kept) and softmax([0.2, 0]) peaks at 0.55 -> background at
        # threshold 0.6.
        scores = np.array([
            [[2.0, 0.0], [0.2, 0.0]],
            [[0.0, 2.0], [1.0, 1.0]],
        ], dtype=np.float32)
        smap = score_map(scores, background=True)
        labels = assign_labels(smap, "softmax_threshold", temperature=1.0,
                               threshold=0.6)
        expected = np.array([[1, 0], [2, 0]], dtype=np.int32)
        np.testing.assert_array_equal(labels, expected)

    def test_background_prompt_wins_by_argmax(self):
        scores = np.zeros((1, 2, 3), dtype=np.float32)
        scores[0, 0] = [0.9, 0.1, 0.5]   # class 1 wins
        scores[0, 1] = [0.2, 0.1, 0.8]   # background column wins
        smap = score_map(scores, background_column=2)
        labels = assign_labels(smap, "background_prompt")
        np.testing.assert_array_equal(labels, [[1, 0]])

    def test_no_background_ignores_strategy_thresholds(self):
        rng = np.random.default_rng(2)
        smap = score_map(rng.standard_normal((3, 3, 4)))
        labels = assign_labels(smap, "softmax_threshold", threshold=0.99)
        assert labels.min() >= 1

    def test_unknown_strategy_rejected(self):
        smap = score_map(np.zeros((1, 1, 1), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            assign_labels(smap, "otsu")

    def test_bad_temperature_rejected(self):
        smap = score_map(np.zeros((1, 1, 2), dtype=np.float32), background=True)
        with pytest.raises(ConfigurationError):
            assign_labels(smap, "softmax_threshold", temperature=0.0)

    def test_background_prompt_needs_background_column(self):
        smap = score_map(np.zeros((1, 1, 2), dtype=np.float32), background=True)
        with pytest.raises(ConfigurationError):
            assign_labels(smap, "background_prompt")


class TestScoreMapFixtures:
    def test_round_trip_with_background_column(self, tmp_path):
        from hierseg.scoring import load_score_map, save_score_map

        rng = np.random.default_rng(7)
        cats = CategorySet.from_names(["cat", "dog"], background=["background"])
        smap = ScoreMap(rng.standard_normal((2, 3, 3)).astype(np.float32),
                        cats, background_column=2)
        p = save_score_map(tmp_path / "s", smap)
        back = load_score_map(p, cats)
        np.testing.assert_array_equal(back.scores, smap.scores)
        assert back.background_column == 2

    def test_misplaced_background_column_rejected(self, tmp_path):
        from hierseg.errors import DataError
        from hierseg.fixtures import save_fixture
        from hierseg.scoring import load_score_map

        cats = CategorySet.from_names(["cat", "dog"], background=["background"])
        save_fixture(tmp_path / "bad.npz",
                     {"scores": np.zeros((2, 2, 3), np.float32)},
                     {"background_column": 0})
        with pytest.raises(DataError):
            load_score_map(tmp_path / "bad.npz", cats)

    def test_column_count_mismatch_rejected(self, tmp_path):
        from hierseg.errors import DataError
        from hierseg.fixtures import save_fixture
        from hierseg.scoring import load_score_map

        cats = CategorySet.from_names(["cat", "dog"])
        save_fixture(tmp_path / "bad.npz",
                     {"scores": np.zeros((2, 2, 5), np.float32)}, {})
        with pytest.raises(DataError):
            load_score_map(tmp_path / "bad.npz", cats)


class TestTextEmbeddingsValidation:
    def test_non_unit_rows_rejected(self):
        cats = CategorySet.from_names(["cat"])
        with pytest.raises(ValidationError):
            TextEmbeddings(np.array([[2.0, 0.0]]), cats)

    def test_row_count_must_match_categories(self):
        cats = CategorySet.from_names(["cat", "dog"])
        with pytest.raises(ShapeError):
            TextEmbeddings(np.eye(3), cats)
