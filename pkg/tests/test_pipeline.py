"""Pipeline orchestration on the toy bundle and replay fixtures."""

import numpy as np
import pytest

from hierseg.config import PipelineConfig, resolve
from hierseg.encoder import PreprocessGeometry
from hierseg.errors import ConfigurationError, DataError
from hierseg.interp import bilinear_resize
from hierseg.pipeline import (
    Pipeline,
    evaluate_dataset,
    expand_to_original,
    relabel_to_full,
    write_report,
)
from hierseg.scoring import CategorySet, ScoreMap


def live_config(toy_weights_root, **extra):
    overrides = {
        "backbone": "toy",
        "weights.root": str(toy_weights_root),
        "input.short_side": 16,
        "text.templates": "single",
        "compensation.enabled": False,
    }
    overrides.update(extra)
    return PipelineConfig(resolve(overrides=overrides))


def replay_config(scores_dir, sd_dir=None, **extra):
    overrides = {
        "replay.scores_dir": str(scores_dir),
        "compensation.enabled": sd_dir is not None,
    }
    if sd_dir is not None:
        overrides["replay.sd_dir"] = str(sd_dir)
    overrides.update(extra)
    return PipelineConfig(resolve(overrides=overrides))


def toy_image(seed=0, size=(16, 16)):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)


class TestLivePipeline:
    def test_single_category_without_background_labels_all(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        cats = CategorySet.from_names(["cat"], template_set="single")
        result = Pipeline.from_config(cfg).run(toy_image(), cats)
        np.testing.assert_array_equal(result.labels, 1)
        assert result.labels.shape == (16, 16)

    def test_scores_at_original_resolution(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        cats = CategorySet.from_names(["cat", "dog"], template_set="single")
        image = toy_image(size=(20, 30))
        result = Pipeline.from_config(cfg).run(image, cats)
        assert result.final.scores.shape == (20, 30, 2)
        assert result.labels.shape == (20, 30)
        assert result.coarse.scores.shape[2] == 2

    def test_deterministic_across_runs(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        cats = CategorySet.from_names(["cat", "dog"], template_set="single")
        p = Pipeline.from_config(cfg)
        a = p.run(toy_image(), cats)
        b = p.run(toy_image(), cats)
        assert a.final.scores.tobytes() == b.final.scores.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_embedding_cache_reused(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        p = Pipeline.from_config(cfg)
        cats = CategorySet.from_names(["cat"], template_set="single")
        p.run(toy_image(), cats)
        assert len(p.scorer._embedding_cache) == 1
        p.run(toy_image(1), cats)
        assert len(p.scorer._embedding_cache) == 1

    def test_restriction_never_introduces_foreign_classes(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        cats = CategorySet.from_names(["cat", "dog", "sky"], template_set="single")
        result = Pipeline.from_config(cfg).run(
            toy_image(), cats, restrict_to=["dog"]
        )
        assert set(np.unique(result.labels)) <= {1}
        assert result.final.categories.names == ("dog",)

    def test_timings_cover_pipeline_stages(self, toy_weights_root):
        cfg = live_config(toy_weights_root)
        cats = CategorySet.from_names(["cat"], template_set="single")
        result = Pipeline.from_config(cfg).run(toy_image(), cats)
        stages = set(result.timer.durations_ms)
        assert {"encoder", "fusion", "text", "total"} <= stages

    def test_compensation_requires_attention_source(self, toy_weights_root):
        cfg = live_config(toy_weights_root, **{"compensation.enabled": True})
        with pytest.raises(Exception) as exc:
            Pipeline.from_config(cfg)
        # Toy weights root has no diffusion weights and no replay directory.
        assert exc.type.__name__ in ("EnvironmentError_", "ConfigurationError")


class TestReplayPipeline:
    def test_replay_requires_image_id(self, replay_dirs):
        scores, _ = replay_dirs
        cfg = replay_config(scores)
        cats = CategorySet.from_file(
            __import__("hierseg.datasets", fromlist=["builtin_class_file"])
            .builtin_class_file("voc")
        )
        with pytest.raises(ConfigurationError):
            Pipeline.from_config(cfg).run(toy_image(), cats)

    def test_identity_attention_matches_compensation_off(self, replay_dirs):
        from hierseg.datasets import builtin_class_file
        scores, sd = replay_dirs
        cats = CategorySet.from_file(builtin_class_file("voc"))
        image = toy_image(size=(16, 16))

        off = Pipeline.from_config(replay_config(scores)).run(
            image, cats, image_id="img00"
        )
        on = Pipeline.from_config(replay_config(scores, sd)).run(
            image, cats, image_id="img00"
        )
        np.testing.assert_allclose(on.final.scores, off.final.scores, atol=1e-6)
        np.testing.assert_array_equal(on.labels, off.labels)

    def test_missing_fixture_is_data_error(self, replay_dirs):
        from hierseg.datasets import builtin_class_file
        scores, _ = replay_dirs
        cats = CategorySet.from_file(builtin_class_file("voc"))
        with pytest.raises(DataError):
            Pipeline.from_config(replay_config(scores)).run(
                toy_image(), cats, image_id="unknown"
            )


class TestExpandToOriginal:
    def test_without_geometry_is_direct_resize(self):
        rng = np.random.default_rng(0)
        cats = CategorySet.from_names(["a", "b"])
        smap = ScoreMap(rng.standard_normal((2, 2, 2)).astype(np.float32), cats)
        out = expand_to_original(smap, None, (8, 6), "bilinear")
        np.testing.assert_allclose(
            out.scores, bilinear_resize(smap.scores, 8, 6), atol=1e-6
        )

    def test_with_geometry_pads_cropped_margins(self):
        rng = np.random.default_rng(1)
        cats = CategorySet.from_names(["a"])
        smap = ScoreMap(rng.standard_normal((2, 2, 1)).astype(np.float32), cats)
        geometry = PreprocessGeometry(
            original_hw=(10, 12), resized_hw=(18, 20),
            crop_top=1, crop_left=2, cropped_hw=(16, 16),
        )
        out = expand_to_original(smap, geometry, (10, 12), "bilinear")

        frame = bilinear_resize(smap.scores, 16, 16)
        frame = np.pad(frame, ((1, 1), (2, 2), (0, 0)), mode="edge")
        expected = bilinear_resize(frame, 10, 12)
        np.testing.assert_allclose(out.scores, expected, atol=1e-6)


class TestRelabel:
    def test_restricted_labels_map_back_to_full_ids(self):
        full = CategorySet.from_names(["cat", "dog", "sky"])
        sub = full.restricted({"dog", "sky"})
        local = np.array([[0, 1], [2, 1]])
        out = relabel_to_full(local, sub, full)
        np.testing.assert_array_equal(out, [[0, 2], [3, 2]])


class TestEvaluateDataset:
    def test_replay_eval_reports_all_classes(self, voc_tree, replay_dirs):
        root, ids = voc_tree
        scores, _ = replay_dirs
        cfg = replay_config(scores, **{
            "dataset.id": "voc", "dataset.root": str(root),
        })
        report, manifest, _ = evaluate_dataset(cfg, limit=5)
        assert report["num_images"] == 5
        assert len(report["per_class_iou"]) == 21
        assert 0.0 <= report["miou"] <= 1.0
        assert manifest["config_hash"] == cfg.hash()
        assert manifest["weights"]["replay_scores_dir"] == str(scores)

    def test_limit_subsets_split(self, voc_tree, replay_dirs):
        root, _ = voc_tree
        scores, _ = replay_dirs
        cfg = replay_config(scores, **{
            "dataset.id": "voc", "dataset.root": str(root),
        })
        report, _, _ = evaluate_dataset(cfg, limit=2)
        assert report["num_images"] == 2

    def test_worker_pool_matches_serial(self, voc_tree, replay_dirs):
        root, _ = voc_tree
        scores, _ = replay_dirs
        serial_cfg = replay_config(scores, **{
            "dataset.id": "voc", "dataset.root": str(root), "eval.workers": 1,
        })
        pooled_cfg = replay_config(scores, **{
            "dataset.id": "voc", "dataset.root": str(root), "eval.workers": 3,
        })
        a, _, _ = evaluate_dataset(serial_cfg)
        b, _, _ = evaluate_dataset(pooled_cfg)
        a.pop("config_hash")
        b.pop("config_hash")
        assert a == b

    def test_live_eval_on_toy_bundle(self, voc_tree, toy_weights_root):
        root, _ = voc_tree
        cfg = live_config(toy_weights_root, **{
            "dataset.id": "voc", "dataset.root": str(root),
        })
        report, _, _ = evaluate_dataset(cfg, limit=2)
        assert report["num_images"] == 2
        assert report["image_level"] is not None

    def test_pseudo_masks_use_given_labels_only(self, voc_tree, replay_dirs,
                                                tmp_path):
        from PIL import Image as PILImage

        root, ids = voc_tree
        scores, _ = replay_dirs
        cfg = replay_config(scores, **{
            "dataset.id": "voc", "dataset.root": str(root),
        })
        mask_out = tmp_path / "masks"
        report, manifest, _ = evaluate_dataset(cfg, pseudo_masks=True,
                                               mask_out=mask_out)
        assert report["pseudo_masks"] is True
        for sid in ids:
            from hierseg.datasets import DatasetSpec, load_sample, present_classes
            spec = DatasetSpec(id="voc", root=str(root))
            _, gt = load_sample(spec, sid)
            allowed = set(present_classes(gt).tolist()) | {0}
            pred = np.asarray(PILImage.open(mask_out / f"{sid}.png"))
            assert set(np.unique(pred).tolist()) <= allowed


@pytest.fixture()
def oracle_replay_dir(tmp_path, voc_tree):
    """Replay scores derived from the ground truth itself: each pixel
    spikes its own class column, background pixels spike the explicit
    background column."""
    from hierseg.datasets import DatasetSpec, load_sample
    from hierseg.fixtures import save_fixture

    root, ids = voc_tree
    spec = DatasetSpec(id="voc", root=str(root))
    cats = spec.categories()
    out = tmp_path / "oracle_scores"
    out.mkdir()
    for sid in ids:
        _, gt = load_sample(spec, sid)
        h, w = gt.shape
        scores = np.zeros((h, w, len(cats) + 1), dtype=np.float32)
        for c in range(1, len(cats) + 1):
            scores[gt == c, c - 1] = 10.0
        scores[(gt == 0) | (gt == 255), len(cats)] = 10.0
        save_fixture(out / f"{sid}.npz", {"scores": scores},
                     {"kind": "similarity", "background_column": len(cats)})
    return out


def oracle_config(oracle_replay_dir, root, **extra):
    return replay_config(oracle_replay_dir, **{
        "dataset.id": "voc", "dataset.root": str(root),
        "background.strategy": "background_prompt",
        **extra,
    })


class TestReplayOracle:
    def test_ground_truth_scores_give_perfect_miou(self, voc_tree,
                                                   oracle_replay_dir):
        root, _ = voc_tree
        cfg = oracle_config(oracle_replay_dir, root)
        report, _, _ = evaluate_dataset(cfg, limit=1)
        assert report["miou"] == 1.0

    def test_pseudo_mask_oracle_gives_perfect_miou(self, voc_tree,
                                                   oracle_replay_dir):
        root, _ = voc_tree
        cfg = oracle_config(oracle_replay_dir, root)
        report, _, _ = evaluate_dataset(cfg, pseudo_masks=True)
        assert report["num_images"] == 5
        assert report["miou"] == 1.0


class TestReports:
    def test_report_files_deterministic_manifest_atomic(self, tmp_path):
        report = {"dataset": "voc", "miou": 0.5, "nested": {"b": 1, "a": 2}}
        manifest = {"config": {"seed": 0}, "created_unix": 123.0}
        paths = write_report(report, manifest, tmp_path)
        first = paths["report_json"].read_bytes()
        txt = paths["report_txt"].read_text()
        write_report(report, manifest, tmp_path)
        assert paths["report_json"].read_bytes() == first
        assert "nested.a = 2" in txt
        assert paths["manifest"].exists()
