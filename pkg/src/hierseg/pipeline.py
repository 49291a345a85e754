"""End-to-end orchestration: scoring sources, runs, evaluation, manifests.

A pipeline combines a coarse score source with an optional diffusion
attention source. Each source is either live (pretrained weights) or a
replay directory of recorded fixtures keyed by image id; replay makes the
full metric path runnable with no model weights at all.

Resolution bookkeeping: the live encoder sees an aspect-preserving resize
followed by a center crop to patch multiples, so coarse scores are mapped
back to the original frame by edge-padding the cropped margins before the
final resize. The refinement path upsamples straight from the diffusion
token grid, mirroring the square resize its model applies. Replay scores
carry no crop geometry and are resized directly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import compensation as comp
from .config import PipelineConfig
from .datasets import load_sample, present_classes
from .diffusion import SDAttention
from .encoder import EncoderHandle, PreprocessGeometry, load_encoder, preprocess, trace_forward
from .errors import ConfigurationError, DataError
from .fusion import fuse
from .interp import resize
from .metrics import ConfusionMatrix, StageTimer, image_level_metrics, max_pool_scores
from .scoring import (
    CategorySet,
    ScoreMap,
    TextEmbeddings,
    assign_labels,
    embed_categories,
    load_score_map,
    select_categories,
    similarity_scores,
)
from .textenc import load_text_encoder


@dataclass(frozen=True)
class SegmentationResult:
    coarse: ScoreMap                  # patch-grid scores
    final: ScoreMap                   # original-resolution scores
    labels: np.ndarray                # (H0, W0) int32, 0 = background
    timer: StageTimer
    geometry: PreprocessGeometry | None


class LiveScorer:
    """Coarse scores from the traced encoder plus prompt embeddings."""

    def __init__(self, handle: EncoderHandle, text_encoder, fusion_cfg,
                 short_side: int):
        self.handle = handle
        self.text_encoder = text_encoder
        self.fusion_cfg = fusion_cfg
        self.short_side = short_side
        self._embedding_cache: dict = {}

    def embeddings_for(self, cats: CategorySet, include_background_row: bool) -> TextEmbeddings:
        key = (cats.names, cats.synonyms, cats.background, cats.template_set,
               include_background_row)
        if key not in self._embedding_cache:
            self._embedding_cache[key] = embed_categories(
                cats, self.text_encoder,
                include_background_row=include_background_row,
            )
        return self._embedding_cache[key]

    def coarse(self, image, cats: CategorySet, include_background_row: bool,
               timer: StageTimer, image_id=None):
        pixels, geometry = preprocess(image, self.handle, self.short_side,
                                      return_geometry=True)
        with timer.stage("encoder"):
            traced = trace_forward(self.handle, pixels)
        with timer.stage("fusion"):
            outputs = fuse(traced, self.fusion_cfg)
        with timer.stage("text"):
            emb = self.embeddings_for(cats, include_background_row)
            smap = similarity_scores(outputs, emb)
        return smap, geometry


class ReplayScorer:
    """Coarse scores reloaded from a fixture directory keyed by image id."""

    def __init__(self, scores_dir: str | Path):
        self.scores_dir = Path(scores_dir)
        if not self.scores_dir.is_dir():
            raise DataError(f"replay scores directory not found: {self.scores_dir}")

    def coarse(self, image, cats: CategorySet, include_background_row: bool,
               timer: StageTimer, image_id=None):
        if image_id is None:
            raise ConfigurationError("replay scoring needs an image id")
        with timer.stage("replay_scores"):
            smap = load_score_map(self.scores_dir / f"{image_id}.npz", cats)
        return smap, None


class LiveAttentionSource:
    def __init__(self, model, extraction_cfg):
        self.model = model
        self.cfg = extraction_cfg

    def attention(self, image, timer: StageTimer, image_id=None) -> SDAttention:
        from .diffusion import encode_and_noise, extract_attention
        with timer.stage("diffusion"):
            latent = encode_and_noise(image, self.cfg, self.model)
            return extract_attention(latent, self.cfg, self.model)


class ReplayAttentionSource:
    def __init__(self, sd_dir: str | Path):
        self.sd_dir = Path(sd_dir)
        if not self.sd_dir.is_dir():
            raise DataError(f"replay attention directory not found: {self.sd_dir}")

    def attention(self, image, timer: StageTimer, image_id=None) -> SDAttention:
        from .diffusion import load_sd_attention
        if image_id is None:
            raise ConfigurationError("replay attention needs an image id")
        with timer.stage("diffusion"):
            return load_sd_attention(self.sd_dir / f"{image_id}.npz")


def expand_to_original(smap: ScoreMap, geometry: PreprocessGeometry | None,
                       original_hw: tuple[int, int], mode: str) -> ScoreMap:
    """Map grid scores back onto the original frame.

    With known crop geometry, scores are resized to the cropped frame,
    edge-padded across the cropped margins, and resized to the original
    size; otherwise they are resized directly.
    """
    if geometry is None:
        return smap.with_scores(
            resize(smap.scores, original_hw[0], original_hw[1], mode=mode)
            .astype(np.float32)
        )
    ch, cw = geometry.cropped_hw
    rh, rw = geometry.resized_hw
    frame = resize(smap.scores, ch, cw, mode=mode)
    top = geometry.crop_top
    left = geometry.crop_left
    frame = np.pad(frame,
                   ((top, rh - ch - top), (left, rw - cw - left), (0, 0)),
                   mode="edge")
    oh, ow = geometry.original_hw
    return smap.with_scores(resize(frame, oh, ow, mode=mode).astype(np.float32))


class Pipeline:
    """One-image segmentation with pluggable model sources."""

    def __init__(self, cfg: PipelineConfig, scorer, attention_source=None):
        self.cfg = cfg
        self.scorer = scorer
        self.attention_source = attention_source
        if cfg.compensation_enabled and attention_source is None:
            raise ConfigurationError(
                "compensation.enabled needs a diffusion attention source "
                "(live weights or replay.sd_dir)"
            )

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Pipeline":
        if cfg.replay_scores_dir:
            scorer = ReplayScorer(cfg.replay_scores_dir)
        else:
            bundle = cfg.weights_root() / cfg.backbone
            handle = load_encoder(bundle)
            text_encoder = load_text_encoder(bundle)
            scorer = LiveScorer(handle, text_encoder, cfg.fusion_config(),
                                cfg.short_side)
        attention_source = None
        if cfg.compensation_enabled:
            if cfg.replay_sd_dir:
                attention_source = ReplayAttentionSource(cfg.replay_sd_dir)
            else:
                from .diffusion import load_diffusion_model
                model = load_diffusion_model(cfg.weights_root())
                attention_source = LiveAttentionSource(model, cfg.extraction_config())
        return cls(cfg, scorer, attention_source)

    def uses_background_row(self, cats: CategorySet) -> bool:
        return (cats.includes_background
                and self.cfg["background.strategy"] == "background_prompt")

    def run(self, image: np.ndarray, cats: CategorySet,
            image_id: str | None = None,
            restrict_to: list[str] | None = None) -> SegmentationResult:
        image = np.asarray(image)
        original_hw = image.shape[:2]
        timer = StageTimer()
        with timer.stage("total"):
            include_bg_row = self.uses_background_row(cats)
            coarse, geometry = self.scorer.coarse(
                image, cats, include_bg_row, timer, image_id=image_id
            )
            if restrict_to is not None:
                coarse = select_categories(coarse, restrict_to)

            mode = self.cfg.interp_mode
            if self.cfg.compensation_enabled:
                att = self.attention_source.attention(image, timer, image_id=image_id)
                with timer.stage("compensation"):
                    refined = comp.compensate(
                        coarse, att, out_hw=original_hw,
                        renormalize=bool(self.cfg["sd.renormalize"]), mode=mode,
                        head_fusion=self.cfg["sd.head_fusion"],
                        single_head=int(self.cfg["sd.single_head_index"]),
                    )
                final = refined.final
            else:
                final = expand_to_original(coarse, geometry, original_hw, mode)

            labels = assign_labels(
                final,
                strategy=self.cfg["background.strategy"],
                temperature=float(self.cfg["background.temperature"]),
                threshold=float(self.cfg["background.threshold"]),
            )
        return SegmentationResult(coarse=coarse, final=final, labels=labels,
                                  timer=timer, geometry=geometry)


# ---------------------------------------------------------------------------
# Evaluation and reports
# ---------------------------------------------------------------------------

def relabel_to_full(labels: np.ndarray, restricted: CategorySet,
                    full: CategorySet) -> np.ndarray:
    """Map labels from a restricted category set back to the full id space."""
    out = np.zeros_like(labels)
    full_index = {n: i + 1 for i, n in enumerate(full.names)}
    for local, name in enumerate(restricted.names, start=1):
        out[labels == local] = full_index[name]
    return out


def evaluate_dataset(cfg: PipelineConfig, limit: int | None = None,
                     pseudo_masks: bool = False,
                     mask_out: Path | None = None):
    """Run the evaluation protocol over a dataset split.

    Returns (report dict, manifest dict, per-image label arrays or None).
    With ``pseudo_masks`` the per-image category set is restricted to the
    classes present in the ground truth before labeling.
    """
    from concurrent.futures import ThreadPoolExecutor

    spec = cfg.dataset_spec()
    cats = spec.categories()
    pipeline = Pipeline.from_config(cfg)
    ids = spec.sample_ids()
    if limit is not None:
        ids = ids[:max(0, int(limit))]
    if not ids:
        raise DataError("no samples selected for evaluation")

    # Prompt embeddings are computed once up front; workers only read them.
    if isinstance(pipeline.scorer, LiveScorer):
        pipeline.scorer.embeddings_for(cats, pipeline.uses_background_row(cats))

    num_labels = len(cats) + 1
    timer = StageTimer()

    def worker(sample_id: str):
        image, gt = load_sample(spec, sample_id)
        restrict = None
        if pseudo_masks:
            present = present_classes(gt)
            present = present[present <= len(cats)]
            if present.size == 0:
                restrict = None
            else:
                restrict = [cats.names[i - 1] for i in present]
        result = pipeline.run(image, cats, image_id=sample_id,
                              restrict_to=restrict)
        labels = result.labels
        if restrict is not None:
            labels = relabel_to_full(labels, result.final.categories, cats)
        cm = ConfusionMatrix(num_labels).update(labels, gt)
        fg_cols = [c for c in range(result.final.scores.shape[2])
                   if c != result.final.background_column]
        pooled = max_pool_scores(result.final.scores[:, :, fg_cols])
        if restrict is not None:
            full_pooled = np.full(len(cats), -np.inf)
            for name, v in zip(result.final.categories.names, pooled):
                full_pooled[cats.names.index(name)] = v
            pooled = full_pooled
        present_vec = np.zeros(len(cats), dtype=bool)
        for c in present_classes(gt):
            if c <= len(cats):
                present_vec[c - 1] = True
        return sample_id, cm, pooled, present_vec, result.timer, labels

    workers = max(1, int(cfg["eval.workers"]))
    results = []
    if workers == 1:
        for sid in ids:
            results.append(worker(sid))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, ids))

    cm_total = ConfusionMatrix(num_labels)
    pooled_rows, presence_rows = [], []
    mask_paths = {}
    for sample_id, cm, pooled, present_vec, t, labels in results:
        cm_total.merge(cm)
        pooled_rows.append(pooled)
        presence_rows.append(present_vec)
        timer.merge(t)
        if mask_out is not None:
            from .datasets import save_indexed_png
            mask_paths[sample_id] = str(
                save_indexed_png(Path(mask_out) / f"{sample_id}.png", labels)
            )

    iou = cm_total.per_class_iou()
    per_class = {}
    if cats.includes_background:
        per_class["background"] = None if np.isnan(iou[0]) else round(float(iou[0]), 6)
    for i, name in enumerate(cats.names, start=1):
        per_class[name] = None if np.isnan(iou[i]) else round(float(iou[i]), 6)

    pooled_arr = np.stack(pooled_rows)
    presence_arr = np.stack(presence_rows)
    finite = np.isfinite(pooled_arr)
    # Softmax-normalize pooled scores per image for the fixed threshold.
    shifted = np.where(finite, pooled_arr, -np.inf)
    mx = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - mx)
    probs = e / e.sum(axis=1, keepdims=True)
    image_level = None
    if presence_arr.any():
        ap_report = image_level_metrics(
            np.where(finite, pooled_arr, -np.inf), presence_arr,
            threshold=-np.inf, class_names=list(cats.names),
        )
        thresholded = image_level_metrics(
            probs, presence_arr, threshold=float(cfg["classify.threshold"]),
            class_names=list(cats.names),
        )
        image_level = {
            "map": round(ap_report.map_score, 6),
            "f1": round(thresholded.f1, 6),
            "precision": round(thresholded.precision, 6),
            "recall": round(thresholded.recall, 6),
        }

    report = {
        "dataset": spec.id,
        "split": spec.split,
        "num_images": len(ids),
        "config_hash": cfg.hash(),
        "compensation": cfg.compensation_enabled,
        "pseudo_masks": pseudo_masks,
        "miou": round(cm_total.miou(), 6),
        "per_class_iou": per_class,
        "image_level": image_level,
    }
    manifest = build_manifest(cfg, extra={
        "dataset": {"id": spec.id, "root": str(spec.root), "split": spec.split,
                    "num_images": len(ids)},
        "timings_ms_median": {k: round(v, 3) for k, v in timer.medians().items()},
        "results": {"miou": report["miou"]},
        "mask_files": mask_paths or None,
    })
    return report, manifest, timer


def build_manifest(cfg: PipelineConfig, extra: dict | None = None) -> dict:
    manifest = {
        "config": cfg.snapshot(),
        "config_hash": cfg.hash(),
        "code_version": _package_version(),
        "weights": _weight_fingerprint(cfg),
        "created_unix": time.time(),
    }
    if extra:
        manifest.update({k: v for k, v in extra.items() if v is not None})
    return manifest


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("hierseg")
    except Exception:
        return "unknown"


def _weight_fingerprint(cfg: PipelineConfig) -> dict:
    if cfg.replay_scores_dir:
        out = {"replay_scores_dir": str(cfg.replay_scores_dir)}
        if cfg.replay_sd_dir:
            out["replay_sd_dir"] = str(cfg.replay_sd_dir)
        return out
    bundle = cfg.weights_root() / cfg.backbone
    manifest_file = bundle / "manifest.json"
    if manifest_file.exists():
        doc = json.loads(manifest_file.read_text())
        return {"backbone": cfg.backbone, "files": doc.get("files", {})}
    return {"backbone": cfg.backbone, "files": {}}


def write_report(report: dict, manifest: dict, out_dir: Path) -> dict[str, Path]:
    """Write report.json / report.txt (deterministic) and manifest.json
    (atomic; carries timings and timestamps)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_json": out_dir / "report.json",
        "report_txt": out_dir / "report.txt",
        "manifest": out_dir / "manifest.json",
    }
    paths["report_json"].write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    paths["report_txt"].write_text(_render_text_report(report))
    tmp = paths["manifest"].with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, paths["manifest"])
    return paths


def _render_text_report(report: dict) -> str:
    lines = []

    def emit(prefix, value):
        if isinstance(value, dict):
            for k in sorted(value):
                emit(f"{prefix}.{k}" if prefix else str(k), value[k])
        else:
            lines.append(f"{prefix} = {value}")

    emit("", report)
    return "\n".join(lines) + "\n"
