"""Benchmark dataset ingestion and mask conventions.

All loaders emit one canonical label space per dataset: 0 is background
(for benchmarks that score it), 1..C are the foreground categories in
class-list order, and 255 marks ignored pixels. Directory layouts follow
each benchmark's published conventions:

* ``voc`` / ``voc20``      - ``JPEGImages/``, ``SegmentationClass/``,
  ``ImageSets/Segmentation/<split>.txt``; masks already use 0/1..20/255.
  The no-background variant additionally maps 0 to ignore.
* ``context`` / ``context59`` - ``JPEGImages/``,
  ``SegmentationClassContext/`` (values 0..59),
  ``ImageSets/SegmentationContext/<split>.txt``; the 59-class variant maps
  0 to ignore.
* ``object`` / ``stuff``   - ``images/<split>2017/`` and
  ``annotations/<split>2017/`` with train-id masks (0..170 plus 255). The
  object variant keeps the 80 thing classes as 1..80 and folds every stuff
  class into background; the stuff variant shifts all 171 classes to 1..171.
* ``ade``                  - ``images/<split>/`` and ``annotations/<split>/``
  (values 0 = unlabeled, 1..150).

Dataset roots are configured paths; nothing is downloaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ValidationError
from .scoring import CategorySet

IGNORE_LABEL = 255

DATASET_IDS = ("voc", "voc20", "context", "context59", "object", "stuff", "ade")

# Published category counts, background included where the benchmark scores it.
EXPECTED_NUM_LABELS = {
    "voc": 21, "voc20": 20, "context": 60, "context59": 59,
    "object": 81, "stuff": 171, "ade": 150,
}

_LAYOUTS = {
    "voc": dict(images="JPEGImages", masks="SegmentationClass",
                split_list="ImageSets/Segmentation/{split}.txt",
                image_suffix=".jpg", mask_suffix=".png"),
    "voc20": dict(images="JPEGImages", masks="SegmentationClass",
                  split_list="ImageSets/Segmentation/{split}.txt",
                  image_suffix=".jpg", mask_suffix=".png"),
    "context": dict(images="JPEGImages", masks="SegmentationClassContext",
                    split_list="ImageSets/SegmentationContext/{split}.txt",
                    image_suffix=".jpg", mask_suffix=".png"),
    "context59": dict(images="JPEGImages", masks="SegmentationClassContext",
                      split_list="ImageSets/SegmentationContext/{split}.txt",
                      image_suffix=".jpg", mask_suffix=".png"),
    "object": dict(images="images/{split}2017", masks="annotations/{split}2017",
                   split_list=None, image_suffix=".jpg", mask_suffix=".png"),
    "stuff": dict(images="images/{split}2017", masks="annotations/{split}2017",
                  split_list=None, image_suffix=".jpg",
                  mask_suffix="_labelTrainIds.png"),
    "ade": dict(images="images/{split}", masks="annotations/{split}",
                split_list=None, image_suffix=".jpg", mask_suffix=".png"),
}


def builtin_class_file(dataset_id: str) -> Path:
    if dataset_id not in DATASET_IDS:
        raise ValidationError(f"unknown dataset id {dataset_id!r}")
    return Path(str(resources.files("hierseg").joinpath(f"assets/classes/{dataset_id}.txt")))


@dataclass(frozen=True)
class DatasetSpec:
    """Identity, location, and class list of one benchmark split."""

    id: str
    root: str
    split: str = "val"
    class_file: str | None = None
    template_set: str = "full80"

    def __post_init__(self):
        if self.id not in DATASET_IDS:
            raise ValidationError(
                f"unknown dataset id {self.id!r}; expected one of {DATASET_IDS}"
            )

    @property
    def includes_background(self) -> bool:
        return self.id in ("voc", "context", "object")

    def categories(self) -> CategorySet:
        path = Path(self.class_file) if self.class_file else builtin_class_file(self.id)
        cats = CategorySet.from_file(path, template_set=self.template_set)
        expected = EXPECTED_NUM_LABELS[self.id]
        got = len(cats) + (1 if cats.includes_background else 0)
        if got != expected:
            raise ValidationError(
                f"{self.id} class list has {got} categories, benchmark has {expected}"
            )
        if cats.includes_background != self.includes_background:
            raise ValidationError(
                f"{self.id} background flag mismatch in class list {path}"
            )
        return cats

    def _layout(self) -> dict:
        return _LAYOUTS[self.id]

    def image_path(self, sample_id: str) -> Path:
        lay = self._layout()
        return (Path(self.root) / lay["images"].format(split=self.split)
                / f"{sample_id}{lay['image_suffix']}")

    def mask_path(self, sample_id: str) -> Path:
        lay = self._layout()
        return (Path(self.root) / lay["masks"].format(split=self.split)
                / f"{sample_id}{lay['mask_suffix']}")

    def sample_ids(self) -> list[str]:
        """Sample ids from the split list, or by scanning the mask dir."""
        lay = self._layout()
        if lay["split_list"] is not None:
            listing = Path(self.root) / lay["split_list"].format(split=self.split)
            if not listing.exists():
                raise DataError(f"split list not found: {listing}")
            ids = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
            if not ids:
                raise DataError(f"split list is empty: {listing}")
            return ids
        mask_dir = Path(self.root) / lay["masks"].format(split=self.split)
        if not mask_dir.is_dir():
            raise DataError(f"mask directory not found: {mask_dir}")
        suffix = lay["mask_suffix"]
        ids = sorted(p.name[: -len(suffix)] for p in mask_dir.glob(f"*{suffix}"))
        if not ids:
            raise DataError(f"no masks matching *{suffix} in {mask_dir}")
        return ids


def _transform_mask(dataset_id: str, raw: np.ndarray) -> np.ndarray:
    out = raw.astype(np.int32)
    if dataset_id in ("voc", "context"):
        return out
    if dataset_id in ("voc20", "context59"):
        out[out == 0] = IGNORE_LABEL
        return out
    if dataset_id == "object":
        ignore = out == IGNORE_LABEL
        things = out < 80
        shifted = np.where(things, out + 1, 0)
        shifted[ignore] = IGNORE_LABEL
        return shifted
    if dataset_id == "stuff":
        ignore = out == IGNORE_LABEL
        out = out + 1
        out[ignore] = IGNORE_LABEL
        return out
    if dataset_id == "ade":
        out[out == 0] = IGNORE_LABEL
        return out
    raise ValidationError(f"unknown dataset id {dataset_id!r}")


def load_sample(spec: DatasetSpec, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Load (RGB image uint8 (H, W, 3), canonical label mask int32 (H, W))."""
    img_path = spec.image_path(sample_id)
    mask_path = spec.mask_path(sample_id)
    try:
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {img_path}: {e}") from e
    try:
        raw = np.asarray(Image.open(mask_path), dtype=np.int32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read mask {mask_path}: {e}") from e
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    if raw.shape != image.shape[:2]:
        raise DataError(
            f"mask {mask_path} is {raw.shape}, image is {image.shape[:2]}"
        )
    return image, _transform_mask(spec.id, raw)


def present_classes(mask: np.ndarray) -> np.ndarray:
    """Sorted foreground labels occurring in a canonical mask."""
    vals = np.unique(mask)
    return vals[(vals != 0) & (vals != IGNORE_LABEL)]


# ---------------------------------------------------------------------------
# Palettes and mask rendering
# ---------------------------------------------------------------------------

def color_palette(n: int = 256) -> np.ndarray:
    """The standard bit-interleaved segmentation palette, (n, 3) uint8.

    Index 0 is black (background); index 255 renders as the conventional
    pale void color.
    """
    palette = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        label, shift = i, 7
        r = g = b = 0
        while label:
            r |= ((label >> 0) & 1) << shift
            g |= ((label >> 1) & 1) << shift
            b |= ((label >> 2) & 1) << shift
            label >>= 3
            shift -= 1
        palette[i] = (r, g, b)
    if n > IGNORE_LABEL:
        palette[IGNORE_LABEL] = (224, 224, 192)
    return palette


def save_indexed_png(path, labels: np.ndarray, palette: np.ndarray | None = None) -> Path:
    """Write a canonical label mask as an indexed-color PNG."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValidationError(f"expected (H, W) labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValidationError("labels outside the 8-bit palette range")
    palette = color_palette() if palette is None else palette
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(palette.astype(np.uint8).flatten().tolist())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def blend_overlay(image: np.ndarray, labels: np.ndarray,
                  palette: np.ndarray | None = None, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend label colors over an RGB image (uint8 in, uint8 out)."""
    image = np.asarray(image, dtype=np.float32)
    labels = np.asarray(labels)
    if image.shape[:2] != labels.shape:
        raise ValidationError(
            f"image {image.shape[:2]} and labels {labels.shape} differ"
        )
    palette = color_palette() if palette is None else palette
    colors = palette[np.clip(labels, 0, len(palette) - 1)].astype(np.float32)
    out = (1 - alpha) * image + alpha * colors
    return np.clip(out, 0, 255).astype(np.uint8)
