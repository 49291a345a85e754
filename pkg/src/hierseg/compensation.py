"""Local-detail refinement of coarse score maps.

The per-head diffusion attention maps are fused into a single transport
map by chain multiplication, the coarse scores are resampled onto the
diffusion token grid, propagated through the fused map, and finally
upsampled to image resolution. Refinement acts on raw similarity scores;
any labeling or thresholding happens strictly afterwards, which preserves
the convex-combination guarantee of a stochastic transport map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import SquareMap, chain_multiply_heads, refine_scores
from .diffusion import SDAttention
from .errors import ConfigurationError, ValidationError
from .interp import resize
from .scoring import ScoreMap


@dataclass(frozen=True)
class RefinementResult:
    """Scores on the diffusion grid and at full image resolution."""

    refined: ScoreMap
    final: ScoreMap


def align_scores(smap: ScoreMap, target_side: int,
                 mode: str = "bilinear") -> np.ndarray:
    """Resample scores onto a square token grid, flattened row-major.

    Returns (target_side**2, C); each category channel is resampled
    independently.
    """
    if target_side <= 0:
        raise ValidationError(f"target side must be positive, got {target_side}")
    resampled = resize(smap.scores, target_side, target_side, mode=mode)
    return resampled.reshape(target_side * target_side, -1)


HEAD_FUSION_STRATEGIES = ("multiplication", "mean", "single")


def fuse_heads(att: SDAttention, strategy: str = "multiplication",
               single_head: int = 0, renormalize: bool = False) -> SquareMap:
    """Collapse the head maps into one transport map.

    ``multiplication`` (the default) chain-multiplies the heads in order;
    ``mean`` averages them elementwise; ``single`` picks one head. Optional
    row renormalization restores exact unit sums after the product.
    """
    if strategy == "multiplication":
        fused = chain_multiply_heads(att.stack)
    elif strategy == "mean":
        fused = SquareMap(att.stack.as_array().mean(axis=0), stochastic=True)
    elif strategy == "single":
        if not 0 <= single_head < att.heads:
            raise ValidationError(
                f"head index {single_head} outside 0..{att.heads - 1}"
            )
        fused = att.stack.maps[single_head]
    else:
        raise ConfigurationError(
            f"unknown head fusion {strategy!r}; "
            f"expected one of {HEAD_FUSION_STRATEGIES}"
        )
    if renormalize:
        data = fused.data / fused.data.sum(axis=1, keepdims=True)
        fused = SquareMap(data, stochastic=True)
    return fused


def compensate(smap: ScoreMap, att: SDAttention, out_hw: tuple[int, int],
               renormalize: bool = False, mode: str = "bilinear",
               head_fusion: str = "multiplication",
               single_head: int = 0) -> RefinementResult:
    """Refine a coarse score map with fused diffusion attention.

    Steps: align the scores to the attention grid, multiply by the fused
    head map, reshape back to the grid, and upsample to ``out_hw``.
    Category order is preserved end to end.
    """
    fused = fuse_heads(att, strategy=head_fusion, single_head=single_head,
                       renormalize=renormalize)
    aligned = align_scores(smap, att.grid_side, mode=mode)
    refined_flat = refine_scores(fused, aligned)
    side = att.grid_side
    refined = smap.with_scores(
        refined_flat.reshape(side, side, -1).astype(np.float32)
    )
    final = smap.with_scores(
        resize(refined.scores, out_hw[0], out_hw[1], mode=mode).astype(np.float32)
    )
    return RefinementResult(refined=refined, final=final)


def upsample_scores(smap: ScoreMap, out_hw: tuple[int, int],
                    mode: str = "bilinear") -> ScoreMap:
    """Bring a coarse map to image resolution without refinement."""
    return smap.with_scores(
        resize(smap.scores, out_hw[0], out_hw[1], mode=mode).astype(np.float32)
    )
