"""Coarse patch-level scoring of fused embeddings against category prompts.

Category lists come from plain text assets: one category per line, commas
separating synonyms within a category, and an optional line starting with
``!`` naming the background synonym group. Each category is embedded by
expanding every synonym through the prompt template set, averaging the
unit-normalized prompt embeddings, and renormalizing; cosine similarity
against patch embeddings (averaged over the selected fusion layers) gives
the coarse score map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import softmax_rows
from .errors import ConfigurationError, ShapeError, ValidationError
from .fusion import FusedOutputs
from .textenc import get_templates

BACKGROUND_STRATEGIES = ("softmax_threshold", "background_prompt")
UNIT_NORM_ATOL = 1e-5
IGNORE_LABEL = 255


@dataclass(frozen=True)
class CategorySet:
    """Ordered open-vocabulary categories plus optional background group.

    ``synonyms[i]`` holds the phrasings of category ``names[i]``; labels in
    a LabelMap are 1-based category indices with 0 reserved for background.
    """

    names: tuple[str, ...]
    synonyms: tuple[tuple[str, ...], ...]
    background: tuple[str, ...] | None = None
    template_set: str = "full80"

    def __post_init__(self):
        if not self.names:
            raise ValidationError("category set is empty")
        if any(not n.strip() for n in self.names):
            raise ValidationError("category names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("category names must be unique")
        if len(self.synonyms) != len(self.names):
            raise ShapeError("one synonym group per category required")

    @classmethod
    def from_names(cls, names, background=None, template_set="full80"):
        names = tuple(names)
        return cls(names=names, synonyms=tuple((n,) for n in names),
                   background=tuple(background) if background else None,
                   template_set=template_set)

    @classmethod
    def from_file(cls, path: str | Path, template_set: str = "full80"):
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
        names, synonyms, background = [], [], None
        for ln in lines:
            if not ln or ln.startswith("#"):
                continue
            if ln.startswith("!"):
                if background is not None:
                    raise ValidationError(f"{path}: multiple background lines")
                background = tuple(s.strip() for s in ln[1:].split(",") if s.strip())
                continue
            group = tuple(s.strip() for s in ln.split(",") if s.strip())
            names.append(group[0])
            synonyms.append(group)
        return cls(names=tuple(names), synonyms=tuple(synonyms),
                   background=background, template_set=template_set)

    @property
    def includes_background(self) -> bool:
        return self.background is not None

    def __len__(self) -> int:
        return len(self.names)

    def restricted(self, keep_names) -> "CategorySet":
        """Subset preserving order; used for pseudo-mask generation."""
        keep = set(keep_names)
        unknown = keep - set(self.names)
        if unknown:
            raise ValidationError(f"unknown categories requested: {sorted(unknown)}")
        idx = [i for i, n in enumerate(self.names) if n in keep]
        if not idx:
            raise ValidationError("restriction removed every category")
        return CategorySet(
            names=tuple(self.names[i] for i in idx),
            synonyms=tuple(self.synonyms[i] for i in idx),
            background=self.background,
            template_set=self.template_set,
        )


@dataclass(frozen=True)
class TextEmbeddings:
    """Unit-normalized joint-space rows, one per category.

    When the category set carries a background group and the pipeline uses
    the ``background_prompt`` strategy, the group's embedding occupies the
    final row and ``background_row`` points at it.
    """

    matrix: np.ndarray
    categories: CategorySet
    background_row: int | None = None

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ShapeError(f"expected (C, D) matrix, got {self.matrix.shape}")
        expected = len(self.categories) + (1 if self.background_row is not None else 0)
        if self.matrix.shape[0] != expected:
            raise ShapeError(
                f"{self.matrix.shape[0]} embedding rows for {expected} categories"
            )
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.abs(norms - 1.0).max() > UNIT_NORM_ATOL:
            raise ValidationError("text embedding rows must be unit-normalized")


def _embed_group(encoder, phrases, templates) -> np.ndarray:
    prompts = [t.format(p) for p in phrases for t in templates]
    raw = np.asarray(encoder.encode(prompts), dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("text encoder produced a zero embedding")
    mean = (raw / norms).mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        raise ValidationError("template-averaged embedding collapsed to zero")
    return mean / n


def embed_categories(cats: CategorySet, encoder,
                     include_background_row: bool = False) -> TextEmbeddings:
    """Template-expand, embed, average, and renormalize every category.

    ``encoder`` is anything with ``encode(list[str]) -> (N, D)``. Rows come
    back unit-normalized; a background row is appended only on request (the
    ``background_prompt`` labeling strategy needs it).
    """
    templates = get_templates(cats.template_set)
    rows = [_embed_group(encoder, syns, templates) for syns in cats.synonyms]
    background_row = None
    if include_background_row:
        if not cats.includes_background:
            raise ValidationError(
                "background row requested but the category set has no background group"
            )
        rows.append(_embed_group(encoder, cats.background, templates))
        background_row = len(rows) - 1
    return TextEmbeddings(np.stack(rows).astype(np.float32), cats, background_row)


@dataclass(frozen=True)
class ScoreMap:
    """Per-location, per-category scores on a stated grid.

    ``scores`` is (h, w, C); column order follows the category set, with a
    trailing background column when the embeddings carried one.
    """

    scores: np.ndarray
    categories: CategorySet
    background_column: int | None = None

    def __post_init__(self):
        if self.scores.ndim != 3:
            raise ShapeError(f"expected (h, w, C) scores, got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("score map contains non-finite values")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.scores.shape[:2]

    def flattened(self) -> np.ndarray:
        h, w, c = self.scores.shape
        return self.scores.reshape(h * w, c)

    def with_scores(self, scores: np.ndarray) -> "ScoreMap":
        return ScoreMap(scores, self.categories, self.background_column)


def similarity_scores(outputs: FusedOutputs, text: TextEmbeddings) -> ScoreMap:
    """Layer-averaged cosine similarity between patches and categories."""
    emb = outputs.embeddings
    if emb.shape[2] != text.matrix.shape[1]:
        raise ShapeError(
            f"joint-space width mismatch: patches {emb.shape[2]}, "
            f"text {text.matrix.shape[1]}"
        )
    norms = np.linalg.norm(emb, axis=2, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("fused embeddings contain a zero row")
    cos = (emb / norms) @ text.matrix.T          # (L, hw, C)
    mean = cos.mean(axis=0, dtype=np.float64).astype(np.float32)
    h, w = outputs.grid
    return ScoreMap(mean.reshape(h, w, -1), text.categories,
                    background_column=text.background_row)


def select_categories(smap: ScoreMap, keep_names) -> ScoreMap:
    """Restrict a score map to a subset of its categories, preserving order.

    The background column, when present, is always kept. Scoring a subset
    this way is identical to re-scoring against the restricted category
    set, because per-category similarities are independent.
    """
    sub = smap.categories.restricted(keep_names)
    name_to_col = {n: i for i, n in enumerate(smap.categories.names)}
    cols = [name_to_col[n] for n in sub.names]
    background_column = None
    if smap.background_column is not None:
        cols.append(smap.background_column)
        background_column = len(cols) - 1
    return ScoreMap(smap.scores[:, :, cols], sub, background_column)


def save_score_map(path, smap: ScoreMap, meta: dict | None = None):
    """Dump a score map in the standard fixture format (array ``scores``)."""
    from .fixtures import save_fixture

    doc = {
        "kind": "similarity",
        "categories": list(smap.categories.names),
        "background_column": smap.background_column,
        "resolution": list(smap.resolution),
    }
    if meta:
        doc.update(meta)
    return save_fixture(path, {"scores": smap.scores}, doc)


def load_score_map(path, categories: CategorySet) -> ScoreMap:
    """Reload a dumped score map against a known category set."""
    from .errors import DataError
    from .fixtures import load_fixture

    arrays, meta = load_fixture(path)
    if "scores" not in arrays:
        raise DataError(f"fixture {path} has no 'scores' array")
    scores = arrays["scores"]
    background_column = meta.get("background_column")
    expected = len(categories) + (1 if background_column is not None else 0)
    if scores.shape[2] != expected:
        raise DataError(
            f"fixture {path} has {scores.shape[2]} score columns, "
            f"category set needs {expected}"
        )
    # Labels are 1-based category indices in column order, so a background
    # column is only valid in the final position.
    if background_column is not None and background_column != expected - 1:
        raise DataError(
            f"fixture {path} places the background column at "
            f"{background_column}; it must be the last column ({expected - 1})"
        )
    names = meta.get("categories")
    if names is not None and tuple(names) != categories.names:
        raise DataError(
            f"fixture {path} was dumped for categories {names}, "
            f"requested {list(categories.names)}"
        )
    return ScoreMap(scores, categories, background_column)


def assign_labels(smap: ScoreMap, strategy: str = "softmax_threshold",
                  temperature: float = 0.01, threshold: float = 0.5) -> np.ndarray:
    """Turn a score map into integer labels (0 = background).

    Without a background group the assignment is a pure argmax over the
    category columns. With one, ``softmax_threshold`` sends locations whose
    softmax(scores / temperature) peak falls below ``threshold`` to
    background, while ``background_prompt`` lets the background column
    compete in the argmax directly.
    """
    if strategy not in BACKGROUND_STRATEGIES:
        raise ConfigurationError(
            f"unknown background strategy {strategy!r}; "
            f"expected one of {BACKGROUND_STRATEGIES}"
        )
    scores = smap.scores
    if not smap.categories.includes_background:
        return np.argmax(scores, axis=2).astype(np.int32) + 1

    if strategy == "background_prompt":
        if smap.background_column is None:
            raise ConfigurationError(
                "background_prompt strategy needs a background score column"
            )
        winners = np.argmax(scores, axis=2).astype(np.int32)
        labels = winners + 1
        labels[winners == smap.background_column] = 0
        return labels

    if smap.background_column is not None:
        scores = np.delete(scores, smap.background_column, axis=2)
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    probs = softmax_rows(scores / temperature)
    labels = np.argmax(scores, axis=2).astype(np.int32) + 1
    labels[probs.max(axis=2) < threshold] = 0
    return labels
