"""Early-layer fusion through a modified final transformer block.

The final block is rerun in a reduced form: its query-key attention map is
replaced by a chosen source map (by default the average of every earlier
block's map), the feed-forward sub-layer and both residual connections are
omitted, and the result is projected straight into the joint text-image
space. Each selected early layer's embeddings pass through this reduced
block independently, yielding one joint-space embedding matrix per layer.

Attention sources:

* ``early_layer_avg`` - mean of all captured early-layer maps;
* ``query_query`` / ``key_key`` / ``value_value`` / ``identity`` /
  ``original`` - self-self variants computed from the final block's own
  projections of the penultimate embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionStack,
    SquareMap,
    average_maps,
    self_self_map,
)
from .encoder import LayerTrace, TraceResult, layer_norm
from .errors import ConfigurationError, ShapeError, ValidationError
from .weights import LastBlockWeights

ATTENTION_SOURCES = (
    "early_layer_avg", "query_query", "key_key", "value_value", "identity",
    "original",
)


@dataclass(frozen=True)
class FusionConfig:
    """Which layers feed the modified block and which map drives it.

    ``layer_set`` selects the early layers whose embeddings are re-fed
    (``None`` means all captured layers); it does not filter the maps that
    enter the average, which always covers every captured layer.
    """

    layer_set: tuple[int, ...] | None = None
    attention_source: str = "early_layer_avg"
    normalizer: str = "count"

    def __post_init__(self):
        if self.attention_source not in ATTENTION_SOURCES:
            raise ConfigurationError(
                f"unknown attention source {self.attention_source!r}; "
                f"expected one of {ATTENTION_SOURCES}"
            )
        if self.layer_set is not None:
            layers = tuple(sorted(set(int(i) for i in self.layer_set)))
            if not layers:
                raise ConfigurationError("layer_set must not be empty")
            object.__setattr__(self, "layer_set", layers)

    def resolve_layers(self, available: int) -> tuple[int, ...]:
        if self.layer_set is None:
            return tuple(range(1, available + 1))
        bad = [i for i in self.layer_set if i < 1 or i > available]
        if bad:
            raise ConfigurationError(
                f"layer_set entries {bad} outside captured range 1..{available}"
            )
        return self.layer_set


@dataclass(frozen=True)
class FusedOutputs:
    """Joint-space embeddings per selected layer, class token dropped.

    ``embeddings`` has shape (len(layers), h * w, joint_dim).
    """

    layers: tuple[int, ...]
    embeddings: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        if self.embeddings.ndim != 3:
            raise ShapeError(f"expected 3-D embeddings, got {self.embeddings.shape}")
        if self.embeddings.shape[0] != len(self.layers):
            raise ShapeError("one embedding matrix per selected layer required")
        if self.embeddings.shape[1] != self.grid[0] * self.grid[1]:
            raise ShapeError("embedding rows must equal grid cells")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValidationError("fused embeddings contain non-finite values")


def build_avg_attention(traces: list[LayerTrace] | tuple[LayerTrace, ...],
                        cfg: FusionConfig) -> SquareMap:
    """Average the head-averaged attention maps of every captured layer."""
    if not traces:
        raise ValidationError("no layer traces to average")
    indices = [t.layer_index for t in traces]
    if indices != list(range(1, len(traces) + 1)):
        raise ValidationError(
            f"traces must cover layers 1..N-1 contiguously, got {indices}"
        )
    stack = AttentionStack(tuple(t.attention_map() for t in traces),
                           axis_meaning="layers")
    return average_maps(stack, cfg.normalizer)


def value_path(embeddings: np.ndarray, w: LastBlockWeights) -> np.ndarray:
    """The final block's value projection of normalized embeddings."""
    return layer_norm(embeddings, w.ln_g, w.ln_b) @ w.w_v.T + w.b_v


def modified_last_block(embeddings: np.ndarray, attn: SquareMap,
                        w: LastBlockWeights) -> np.ndarray:
    """Reduced final block: attention-weighted values, projected; no FFN,
    no residuals.

    Computes proj(ln_post(out_proj(attn @ value_path(embeddings)))) for the
    full token sequence including the class row; callers drop rows as
    needed.
    """
    if embeddings.shape[0] != attn.tokens:
        raise ShapeError(
            f"{embeddings.shape[0]} embedding rows vs {attn.tokens}-token map"
        )
    if embeddings.shape[1] != w.width:
        raise ShapeError(
            f"embedding width {embeddings.shape[1]} does not match block width {w.width}"
        )
    mixed = attn.data @ value_path(embeddings, w)
    out = mixed @ w.w_o.T + w.b_o
    return layer_norm(out, w.ln_post_g, w.ln_post_b) @ w.proj


def _source_map(source: str, result: TraceResult, cfg: FusionConfig) -> SquareMap:
    if source == "early_layer_avg":
        return build_avg_attention(result.traces, cfg)
    w = result.last_block
    penultimate = result.traces[-1].embeddings
    x = layer_norm(penultimate, w.ln_g, w.ln_b)
    q = x @ w.w_q.T + w.b_q
    k = x @ w.w_k.T + w.b_k
    v = x @ w.w_v.T + w.b_v
    return self_self_map(source, q, k, v, d=q.shape[1])


def fuse(result: TraceResult, cfg: FusionConfig) -> FusedOutputs:
    """Run each selected layer's embeddings through the modified block.

    The attention source is built once and shared across layers. Class-token
    rows are computed but excluded from the returned embeddings.
    """
    layers = cfg.resolve_layers(len(result.traces))
    attn = _source_map(cfg.attention_source, result, cfg)
    if attn.tokens != result.tokens:
        raise ShapeError(
            f"attention source covers {attn.tokens} tokens, traces have {result.tokens}"
        )
    by_index = {t.layer_index: t for t in result.traces}
    outputs = np.stack([
        modified_last_block(by_index[i].embeddings, attn, result.last_block)[1:]
        for i in layers
    ])
    return FusedOutputs(layers=layers, embeddings=outputs, grid=result.grid)
