"""Command-line interface.

Verbs: ``segment`` (one image), ``eval`` (dataset split), ``pseudo-masks``
(masks from given image-level labels), ``dump`` (fixtures + heatmaps), and
``fetch-weights`` (download and convert published checkpoints).

Exit codes: 0 success, 2 configuration problem, 3 environment problem
(missing weights or optional runtime), 4 data problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig, parse_overrides
from .errors import (
    ConfigurationError,
    DataError,
    EnvironmentError_,
    HiersegError,
    ShapeError,
    ValidationError,
)

EXIT_CONFIG = 2
EXIT_ENVIRONMENT = 3
EXIT_DATA = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file of key = value lines")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--backbone", help="encoder bundle id (vit_b_16, vit_l_14)")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--weights-root", help="weights directory")
    parser.add_argument("--no-compensation", action="store_true",
                        help="disable the diffusion refinement stage")


def _config_from_args(args, manifest_snapshot: dict | None = None) -> PipelineConfig:
    overrides = parse_overrides(list(args.overrides))
    if args.backbone:
        overrides["backbone"] = args.backbone
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.weights_root:
        overrides["weights.root"] = args.weights_root
    if args.no_compensation:
        overrides["compensation.enabled"] = False
    if manifest_snapshot is not None:
        from .config import resolve
        merged = dict(manifest_snapshot)
        merged.update(overrides)
        return PipelineConfig(resolve(overrides=merged))
    return PipelineConfig.build(args.config, overrides)


def _load_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"image not found: {p}")
    try:
        return np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {p}: {e}") from e


def _categories_from_args(args, cfg: PipelineConfig):
    from .scoring import CategorySet

    template_set = cfg["text.templates"]
    if getattr(args, "class_file", None):
        return CategorySet.from_file(args.class_file, template_set=template_set)
    if getattr(args, "categories", None):
        names = [c.strip() for c in args.categories.split(",") if c.strip()]
        background = None
        if getattr(args, "background", None):
            background = [b.strip() for b in args.background.split(",") if b.strip()]
        return CategorySet.from_names(names, background=background,
                                      template_set=template_set)
    raise ConfigurationError("provide --categories or --class-file")


def _save_heatmap(path: Path, grid: np.ndarray) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    scaled = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    img = Image.fromarray((scaled * 255).astype(np.uint8), mode="L")
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_segment(args) -> int:
    from .datasets import blend_overlay, save_indexed_png
    from .pipeline import Pipeline
    from .scoring import save_score_map

    cfg = _config_from_args(args)
    cats = _categories_from_args(args, cfg)
    image = _load_image(args.image)
    pipeline = Pipeline.from_config(cfg)
    result = pipeline.run(image, cats, image_id=Path(args.image).stem)

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    label_path = save_indexed_png(out / f"{stem}_labels.png", result.labels)
    overlay = blend_overlay(image, result.labels)
    overlay_path = out / f"{stem}_overlay.png"
    Image.fromarray(overlay).save(overlay_path)
    written = [str(label_path), str(overlay_path)]
    if args.dump_scores:
        written.append(str(save_score_map(out / f"{stem}_scores", result.coarse,
                                          {"config_hash": cfg.hash()})))
    print(f"segmented {args.image}: labels in {label_path}")
    for w in written[1:]:
        print(f"wrote {w}")
    return 0


def cmd_eval(args, pseudo_masks: bool = False) -> int:
    from .pipeline import evaluate_dataset, write_report

    snapshot = None
    if args.manifest:
        mf = Path(args.manifest)
        if not mf.exists():
            raise ConfigurationError(f"manifest not found: {mf}")
        snapshot = json.loads(mf.read_text()).get("config")
        if snapshot is None:
            raise ConfigurationError(f"manifest {mf} carries no config snapshot")
    cfg = _config_from_args(args, manifest_snapshot=snapshot)

    mask_out = None
    if pseudo_masks:
        mask_out = cfg.out_dir / "masks"
    report, manifest, _ = evaluate_dataset(cfg, limit=args.limit,
                                           pseudo_masks=pseudo_masks,
                                           mask_out=mask_out)
    paths = write_report(report, manifest, cfg.out_dir)
    print(f"dataset {report['dataset']} split {report['split']} "
          f"images {report['num_images']}")
    print(f"miou {report['miou']:.4f}")
    if report["image_level"]:
        il = report["image_level"]
        print(f"map {il['map']:.4f} f1 {il['f1']:.4f} "
              f"precision {il['precision']:.4f} recall {il['recall']:.4f}")
    print(f"report {paths['report_json']}")
    return 0


def cmd_pseudo_masks(args) -> int:
    return cmd_eval(args, pseudo_masks=True)


def cmd_dump(args) -> int:
    from .encoder import load_encoder, preprocess, trace_forward
    from .fixtures import save_fixture

    cfg = _config_from_args(args)
    image = _load_image(args.image)
    image_id = args.image_id or Path(args.image).stem
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "layer_trace":
        handle = load_encoder(cfg.weights_root() / cfg.backbone)
        pixels = preprocess(image, handle, cfg.short_side)
        traced = trace_forward(handle, pixels)
        maps = np.stack([t.attention_map().data for t in traced.traces])
        embeddings = np.stack([t.embeddings for t in traced.traces])
        path = save_fixture(out / f"{image_id}_layer_trace",
                            {"maps": maps, "embeddings": embeddings},
                            {"kind": "layer_trace",
                             "layers": [t.layer_index for t in traced.traces],
                             "grid": list(traced.grid),
                             "backbone": cfg.backbone,
                             "config_hash": cfg.hash()})
        h, w = traced.grid
        for t in traced.traces:
            cls_row = t.attention_map().data[0, 1:].reshape(h, w)
            _save_heatmap(out / f"{image_id}_layer{t.layer_index:02d}_cls.png",
                          cls_row)
        print(f"wrote {path} and {len(traced.traces)} heatmaps")
        return 0

    if args.kind == "sd_attention":
        from .diffusion import (
            encode_and_noise,
            extract_attention,
            load_diffusion_model,
            save_sd_attention,
        )
        ext = cfg.extraction_config()
        model = load_diffusion_model(cfg.weights_root())
        latent = encode_and_noise(image, ext, model)
        att = extract_attention(latent, ext, model)
        path = save_sd_attention(out / f"{image_id}.npz", att, ext)
        side = att.grid_side
        for head, m in enumerate(att.stack.maps):
            _save_heatmap(out / f"{image_id}_head{head:02d}.png",
                          m.data.mean(axis=0).reshape(side, side))
        print(f"wrote {path} and {att.heads} heatmaps")
        return 0

    if args.kind == "similarity":
        from .pipeline import Pipeline
        from .scoring import save_score_map

        cats = _categories_from_args(args, cfg)
        pipeline = Pipeline.from_config(cfg)
        include_bg = pipeline.uses_background_row(cats)
        from .metrics import StageTimer
        smap, _ = pipeline.scorer.coarse(image, cats, include_bg, StageTimer(),
                                         image_id=image_id)
        path = save_score_map(out / f"{image_id}", smap,
                              {"config_hash": cfg.hash()})
        for c, name in enumerate(smap.categories.names):
            _save_heatmap(out / f"{image_id}_{name.replace(' ', '_')}.png",
                          smap.scores[:, :, c])
        print(f"wrote {path} and {len(smap.categories)} heatmaps")
        return 0

    raise ConfigurationError(f"unknown dump kind {args.kind!r}")


def cmd_fetch_weights(args) -> int:
    from .weights import BACKBONES, fetch_backbone, weights_root

    root = weights_root(args.weights_root or None)
    for target in args.targets:
        if target in BACKBONES:
            bundle = fetch_backbone(target, root, checkpoint=args.checkpoint)
            print(f"bundle ready: {bundle}")
        elif target == "sd":
            _fetch_sd(root)
            print(f"diffusion weights ready: {root / 'sd'}")
        else:
            raise ConfigurationError(
                f"unknown weights target {target!r}; "
                f"expected one of {sorted(BACKBONES) + ['sd']}"
            )
    return 0


def _fetch_sd(root: Path) -> None:
    from .diffusion import SD_MODEL_ID
    try:
        from huggingface_hub import snapshot_download
    except ImportError as e:
        raise EnvironmentError_(
            "fetching diffusion weights requires huggingface_hub "
            "(install the 'live' extra)"
        ) from e
    snapshot_download(
        repo_id=SD_MODEL_ID,
        local_dir=root / "sd",
        allow_patterns=["model_index.json", "vae/*", "unet/*",
                        "text_encoder/*", "tokenizer/*", "scheduler/*"],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierseg",
        description="Training-free open-vocabulary segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("image")
    p.add_argument("--categories", help="comma-separated category names")
    p.add_argument("--class-file", help="category list file")
    p.add_argument("--background", help="comma-separated background synonyms")
    p.add_argument("--dump-scores", action="store_true",
                   help="also write the coarse score fixture")
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="evaluate a dataset split")
    p.add_argument("--limit", type=int, help="evaluate only the first k samples")
    p.add_argument("--manifest", help="rerun from a recorded manifest")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-masks",
                       help="predict masks given image-level labels")
    p.add_argument("--limit", type=int)
    p.add_argument("--manifest", help=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_pseudo_masks)

    p = sub.add_parser("dump", help="write fixtures and heatmaps")
    p.add_argument("kind", choices=["layer_trace", "sd_attention", "similarity"])
    p.add_argument("image")
    p.add_argument("--image-id", help="fixture id (defaults to the file stem)")
    p.add_argument("--categories")
    p.add_argument("--class-file")
    p.add_argument("--background")
    _add_common(p)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("fetch-weights", help="download and convert weights")
    p.add_argument("targets", nargs="+",
                   help="backbone ids and/or 'sd'")
    p.add_argument("--checkpoint", help="use an already-downloaded checkpoint")
    p.add_argument("--weights-root")
    p.set_defaults(func=cmd_fetch_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, ShapeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EnvironmentError_ as e:
        print(f"environment error: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except HiersegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
