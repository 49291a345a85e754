"""Image-tower forward pass with per-layer capture.

The vision transformer is executed directly on numpy arrays from a weight
bundle, which keeps every intermediate quantity inspectable: the traced
forward returns each block's output embeddings together with the attention
map that produced them. The whole image is processed in a single pass (no
sliding window); positional embeddings are resampled to the actual patch
grid when it differs from the bundle's native grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import AttentionStack, SquareMap, softmax_rows
from .errors import ConfigurationError, ShapeError, ValidationError
from .interp import bilinear_resize
from .weights import (
    BlockWeights,
    LastBlockWeights,
    VisionWeights,
    load_bundle,
    make_toy_vision,
)

HEAD_POLICIES = ("mean", "per_head_passthrough")


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def quick_gelu(x: np.ndarray) -> np.ndarray:
    return x * (1.0 / (1.0 + np.exp(-1.702 * x)))


def exact_gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


_GELU = {"quick": quick_gelu, "exact": exact_gelu}


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(T, D) -> (heads, T, D // heads), contiguous head slices."""
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(heads, T, dh) -> (T, heads * dh)."""
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def attention_forward(x_ln: np.ndarray, bw: BlockWeights, heads: int,
                      attn_bias: np.ndarray | None = None):
    """Multi-head self-attention on pre-normalized tokens.

    ``attn_bias`` is an optional additive (T, T) logit mask (e.g. causal).
    Returns (output tokens (T, D), per-head maps (heads, T, T)).
    """
    q = split_heads(x_ln @ bw.w_q.T + bw.b_q, heads)
    k = split_heads(x_ln @ bw.w_k.T + bw.b_k, heads)
    v = split_heads(x_ln @ bw.w_v.T + bw.b_v, heads)
    dh = q.shape[-1]
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(np.float32(dh))
    if attn_bias is not None:
        logits = logits + attn_bias
    maps = softmax_rows(logits)
    ctx = merge_heads(maps @ v)
    return ctx @ bw.w_o.T + bw.b_o, maps


def forward_block(x: np.ndarray, bw: BlockWeights, heads: int,
                  gelu: str = "quick", attn_bias: np.ndarray | None = None):
    """One standard pre-norm block: residual attention then residual MLP.

    Returns (block output, per-head attention maps).
    """
    ctx, maps = attention_forward(layer_norm(x, bw.ln1_g, bw.ln1_b), bw, heads,
                                  attn_bias)
    x = x + ctx
    h = layer_norm(x, bw.ln2_g, bw.ln2_b)
    h = _GELU[gelu](h @ bw.w_mlp_in.T + bw.b_mlp_in) @ bw.w_mlp_out.T + bw.b_mlp_out
    return x + h, maps


def head_collapse(per_head_maps: np.ndarray, policy: str = "mean"):
    """Reduce per-head maps (H, T, T) to one map or keep them as a stack."""
    if policy not in HEAD_POLICIES:
        raise ConfigurationError(
            f"unknown head policy {policy!r}; expected one of {HEAD_POLICIES}"
        )
    maps = np.asarray(per_head_maps)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise ShapeError(f"expected (heads, T, T) maps, got shape {maps.shape}")
    if policy == "mean":
        return SquareMap(maps.mean(axis=0), stochastic=True)
    return AttentionStack(
        tuple(SquareMap(m, stochastic=True) for m in maps), axis_meaning="heads"
    )


@dataclass(frozen=True)
class LayerTrace:
    """Captured state of one transformer block.

    ``layer_index`` is 1-based; ``embeddings`` is the block's output (class
    token at row 0); ``attention`` is the map computed inside the block,
    head-averaged (SquareMap) or per-head (AttentionStack) per policy.
    """

    layer_index: int
    embeddings: np.ndarray
    attention: SquareMap | AttentionStack

    def __post_init__(self):
        t = self.embeddings.shape[0]
        at = self.attention.tokens
        if t != at:
            raise ShapeError(
                f"layer {self.layer_index}: {t} embedding rows vs {at}-token map"
            )

    def attention_map(self) -> SquareMap:
        """The head-averaged map regardless of capture policy."""
        if isinstance(self.attention, SquareMap):
            return self.attention
        return SquareMap(self.attention.as_array().mean(axis=0), stochastic=True)


@dataclass(frozen=True)
class TraceResult:
    traces: tuple[LayerTrace, ...]
    last_block: LastBlockWeights
    grid: tuple[int, int]         # patch grid (h, w); token count is h * w + 1

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1] + 1


@dataclass(frozen=True)
class EncoderHandle:
    """Immutable handle for a loaded image tower; safe to share."""

    backbone_id: str
    weights: VisionWeights
    image_mean: tuple[float, float, float]
    image_std: tuple[float, float, float]
    gelu: str = "quick"

    @property
    def patch_size(self) -> int:
        return self.weights.patch_size

    @property
    def depth(self) -> int:
        return self.weights.depth

    @property
    def width(self) -> int:
        return self.weights.width

    @property
    def head_count(self) -> int:
        return self.weights.heads

    @property
    def joint_dim(self) -> int:
        return self.weights.joint_dim


def load_encoder(bundle_dir: str | Path) -> EncoderHandle:
    manifest, vision, _ = load_bundle(bundle_dir)
    return EncoderHandle(
        backbone_id=manifest.get("backbone_id", Path(bundle_dir).name),
        weights=vision,
        image_mean=tuple(manifest.get("image_mean", (0.5, 0.5, 0.5))),
        image_std=tuple(manifest.get("image_std", (0.5, 0.5, 0.5))),
        gelu=manifest.get("gelu", "quick"),
    )


def toy_encoder(seed: int = 0, depth: int = 2, width: int = 8, heads: int = 2,
                patch_size: int = 8, joint_dim: int = 6) -> EncoderHandle:
    return EncoderHandle(
        backbone_id="toy",
        weights=make_toy_vision(depth=depth, width=width, heads=heads,
                                patch_size=patch_size, joint_dim=joint_dim,
                                seed=seed),
        image_mean=(0.5, 0.5, 0.5),
        image_std=(0.5, 0.5, 0.5),
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessGeometry:
    """How a preprocessed frame maps back onto the original image."""

    original_hw: tuple[int, int]
    resized_hw: tuple[int, int]     # after aspect-preserving resize
    crop_top: int
    crop_left: int
    cropped_hw: tuple[int, int]     # final frame fed to the encoder


def preprocess(image, handle: EncoderHandle, short_side: int = 336,
               return_geometry: bool = False):
    """Resize, crop to patch multiples, and normalize an RGB image.

    The shorter side is scaled to ``short_side`` (which must be a multiple
    of the patch size) preserving aspect ratio; both sides are then reduced
    to the nearest patch multiple by symmetric center crop. Returns a
    float32 (H, W, 3) array normalized with the bundle's channel statistics,
    plus the crop geometry when requested.
    """
    p = handle.patch_size
    if short_side % p != 0:
        raise ConfigurationError(
            f"short side {short_side} is not a multiple of patch size {p}"
        )
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValidationError(f"expected (H, W, 3) image array, got {image.shape}")
        pil = Image.fromarray(image.astype(np.uint8), mode="RGB")
    else:
        pil = image.convert("RGB")
    w, h = pil.size
    if w == 0 or h == 0:
        raise ValidationError("image has a zero-sized side")

    scale = short_side / min(w, h)
    new_w = max(p, round(w * scale))
    new_h = max(p, round(h * scale))
    pil = pil.resize((new_w, new_h), Image.Resampling.BICUBIC)

    crop_w = (new_w // p) * p
    crop_h = (new_h // p) * p
    left = (new_w - crop_w) // 2
    top = (new_h - crop_h) // 2
    pil = pil.crop((left, top, left + crop_w, top + crop_h))

    arr = np.asarray(pil, dtype=np.float32) / 255.0
    mean = np.asarray(handle.image_mean, dtype=np.float32)
    std = np.asarray(handle.image_std, dtype=np.float32)
    out = (arr - mean) / std
    if not return_geometry:
        return out
    geometry = PreprocessGeometry(
        original_hw=(h, w), resized_hw=(new_h, new_w),
        crop_top=top, crop_left=left, cropped_hw=(crop_h, crop_w),
    )
    return out, geometry


def _interpolated_positions(vw: VisionWeights, grid: tuple[int, int]) -> np.ndarray:
    if grid == vw.grid0:
        return vw.pos_embedding
    g0h, g0w = vw.grid0
    spatial = vw.pos_embedding[1:].reshape(g0h, g0w, vw.width)
    resampled = bilinear_resize(spatial, grid[0], grid[1]).reshape(-1, vw.width)
    return np.concatenate([vw.pos_embedding[:1], resampled.astype(vw.pos_embedding.dtype)])


def embed_patches(handle: EncoderHandle, pixels: np.ndarray):
    """Patchify a preprocessed image into the token sequence.

    Returns (tokens (h*w + 1, D) with class token at row 0, grid (h, w)).
    """
    p = handle.patch_size
    hpx, wpx = pixels.shape[:2]
    if hpx % p or wpx % p:
        raise ShapeError(
            f"preprocessed image {hpx}x{wpx} is not a multiple of patch size {p}"
        )
    h, w = hpx // p, wpx // p
    # (h, P, w, P, 3) -> (h, w, 3, P, P) -> rows of flattened (c, y, x) blocks,
    # matching the stored kernel layout.
    patches = pixels.reshape(h, p, w, p, 3).transpose(0, 2, 4, 1, 3).reshape(h * w, -1)
    x = patches.astype(np.float32) @ handle.weights.patch_kernel.T
    tokens = np.concatenate([handle.weights.class_embedding[None, :], x])
    return tokens + _interpolated_positions(handle.weights, (h, w)), (h, w)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def trace_forward(handle: EncoderHandle, pixels: np.ndarray,
                  head_policy: str = "mean") -> TraceResult:
    """Run blocks 1..N-1 on a preprocessed image, capturing each block.

    The final block is not executed; its weights are returned for the
    modified forward pass. Capture does not alter the computation, so the
    traced embeddings are exactly what an untapped run would produce.
    """
    vw = handle.weights
    x, grid = embed_patches(handle, pixels)
    x = layer_norm(x, vw.ln_pre_g, vw.ln_pre_b)
    traces = []
    for n, bw in enumerate(vw.blocks[:-1], start=1):
        x, per_head = forward_block(x, bw, handle.head_count, handle.gelu)
        traces.append(LayerTrace(n, x, head_collapse(per_head, head_policy)))
    return TraceResult(tuple(traces), vw.last_block(), grid)


def encode_image(handle: EncoderHandle, pixels: np.ndarray) -> np.ndarray:
    """Standard full forward; returns the joint-space class embedding."""
    vw = handle.weights
    x, _ = embed_patches(handle, pixels)
    x = layer_norm(x, vw.ln_pre_g, vw.ln_pre_b)
    for bw in vw.blocks:
        x, _ = forward_block(x, bw, handle.head_count, handle.gelu)
    cls = layer_norm(x[0], vw.ln_post_g, vw.ln_post_b)
    return cls @ vw.proj
