"""Self-attention extraction from a pretrained latent denoising model.

One conditioned forward pass is run at a configured noise level with an
empty text prompt, and the multi-head self-attention probability maps are
collected from every block operating at the largest spatial token count.
Only the schedule arithmetic and map bookkeeping live here as importable
numpy code; the model execution itself sits behind optional torch and
diffusers imports, and every extraction can be dumped to or replayed from
the standard fixture format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionStack, SquareMap
from .errors import ConfigurationError, EnvironmentError_, ValidationError
from .fixtures import load_fixture, save_fixture

LAYER_COMBINE_MODES = ("mean", "concat_heads")

# Training-schedule constants of the supported latent diffusion family.
TRAIN_TIMESTEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012

SD_WEIGHTS_SUBDIR = "sd"
SD_MODEL_ID = "stabilityai/stable-diffusion-2-1-base"


@dataclass(frozen=True)
class ExtractionConfig:
    """Where in the schedule to probe and how to merge same-size blocks."""

    timestep_index: int = 45
    total_steps: int = 50
    resolution_policy: str = "highest_only"
    layer_combine: str = "mean"
    seed: int = 0
    input_side: int = 512

    def __post_init__(self):
        if not 0 <= self.timestep_index < self.total_steps:
            raise ValidationError(
                f"timestep_index {self.timestep_index} outside [0, {self.total_steps})"
            )
        if self.resolution_policy != "highest_only":
            raise ConfigurationError(
                f"unknown resolution policy {self.resolution_policy!r}"
            )
        if self.layer_combine not in LAYER_COMBINE_MODES:
            raise ConfigurationError(
                f"unknown layer_combine {self.layer_combine!r}; "
                f"expected one of {LAYER_COMBINE_MODES}"
            )


@dataclass(frozen=True)
class SDAttention:
    """Per-head self-attention maps over an L-token square latent grid."""

    stack: AttentionStack
    grid_side: int

    def __post_init__(self):
        if self.stack.axis_meaning != "heads":
            raise ValidationError("diffusion attention must be a head stack")
        if len(self.stack) == 0:
            raise ValidationError("diffusion attention stack is empty")
        if self.grid_side * self.grid_side != self.stack.tokens:
            raise ValidationError(
                f"token count {self.stack.tokens} is not grid_side^2 "
                f"({self.grid_side}^2)"
            )

    @property
    def heads(self) -> int:
        return len(self.stack)

    @property
    def tokens(self) -> int:
        return self.stack.tokens


class NoiseSchedule:
    """Squared-sqrt-linear beta schedule with spaced inference timesteps."""

    def __init__(self, train_timesteps: int = TRAIN_TIMESTEPS,
                 beta_start: float = BETA_START, beta_end: float = BETA_END):
        steps = np.arange(train_timesteps, dtype=np.float64)
        sqrt_betas = (np.sqrt(beta_start)
                      + steps / (train_timesteps - 1)
                      * (np.sqrt(beta_end) - np.sqrt(beta_start)))
        self.betas = sqrt_betas ** 2
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)
        self.train_timesteps = train_timesteps

    def inference_timesteps(self, total_steps: int) -> np.ndarray:
        """Descending training-step indices for a spaced inference run."""
        if not 0 < total_steps <= self.train_timesteps:
            raise ValidationError(
                f"total_steps must be in 1..{self.train_timesteps}, got {total_steps}"
            )
        stride = self.train_timesteps // total_steps
        ts = (np.arange(total_steps) * stride)[::-1] + 1
        return np.minimum(ts, self.train_timesteps - 1)

    def coefficients(self, timestep: int) -> tuple[float, float]:
        """(signal scale, noise scale) = (sqrt(a-bar), sqrt(1 - a-bar))."""
        ab = float(self.alphas_cumprod[int(timestep)])
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def timestep_for_index(cfg: ExtractionConfig,
                       schedule: NoiseSchedule | None = None) -> int:
    """Map a 0-based index along the descending inference trajectory to a
    training timestep. Index 0 is the noisiest step; higher indices sit at
    lower noise where local detail survives."""
    schedule = schedule or NoiseSchedule()
    return int(schedule.inference_timesteps(cfg.total_steps)[cfg.timestep_index])


def noise_latent(latent: np.ndarray, cfg: ExtractionConfig,
                 schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Forward-noise a clean latent to the configured timestep.

    Deterministic for a fixed config seed: x_t = s * x_0 + n * eps with
    (s, n) from the schedule and eps drawn from a seeded generator.
    """
    schedule = schedule or NoiseSchedule()
    if not np.all(np.isfinite(latent)):
        raise ValidationError("latent contains non-finite values")
    t = timestep_for_index(cfg, schedule)
    signal, noise = schedule.coefficients(t)
    eps = np.random.default_rng(cfg.seed).standard_normal(latent.shape)
    return (signal * latent + noise * eps).astype(latent.dtype, copy=False)


def combine_block_maps(blocks: list[np.ndarray], policy: str = "mean") -> np.ndarray:
    """Merge per-block (H, L, L) map arrays collected at one resolution.

    ``mean`` averages the maps head-by-head across blocks (head counts must
    agree); ``concat_heads`` keeps every block's heads as extra heads.
    """
    if policy not in LAYER_COMBINE_MODES:
        raise ConfigurationError(
            f"unknown layer_combine {policy!r}; expected one of {LAYER_COMBINE_MODES}"
        )
    if not blocks:
        raise ValidationError("no attention blocks to combine")
    arrays = [np.asarray(b) for b in blocks]
    for a in arrays:
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValidationError(f"expected (H, L, L) maps, got shape {a.shape}")
        if a.shape[2] != arrays[0].shape[2]:
            raise ValidationError("blocks mix token counts")
    if policy == "concat_heads":
        return np.concatenate(arrays, axis=0)
    if len({a.shape[0] for a in arrays}) != 1:
        raise ValidationError("mean combine requires equal head counts per block")
    return np.mean(arrays, axis=0)


def attention_from_maps(maps: np.ndarray) -> SDAttention:
    """Wrap a raw (H, L, L) array, enforcing stochastic rows and square L."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValidationError(f"expected (H, L, L) maps, got shape {maps.shape}")
    side = int(round(np.sqrt(maps.shape[1])))
    if side * side != maps.shape[1]:
        raise ValidationError(f"token count {maps.shape[1]} is not a perfect square")
    stack = AttentionStack(
        tuple(SquareMap(m, stochastic=True, row_atol=1e-4) for m in maps),
        axis_meaning="heads",
    )
    return SDAttention(stack=stack, grid_side=side)


def save_sd_attention(path, att: SDAttention, cfg: ExtractionConfig | None = None):
    meta = {
        "kind": "sd_attention",
        "grid_side": att.grid_side,
        "head_order": list(range(att.heads)),
    }
    if cfg is not None:
        meta["config"] = {
            "timestep_index": cfg.timestep_index,
            "total_steps": cfg.total_steps,
            "layer_combine": cfg.layer_combine,
            "seed": cfg.seed,
        }
    return save_fixture(path, {"maps": att.stack.as_array()}, meta)


def load_sd_attention(path) -> SDAttention:
    arrays, _ = load_fixture(path)
    if "maps" not in arrays:
        raise ValidationError(f"fixture {path} has no 'maps' array")
    return attention_from_maps(arrays["maps"].astype(np.float64))


# ---------------------------------------------------------------------------
# Live extraction (optional torch + diffusers runtime)
# ---------------------------------------------------------------------------

class DiffusionModel:
    """Handle around the pretrained VAE, UNet, and null-prompt embedding."""

    def __init__(self, vae, unet, null_embedding, device: str = "cpu"):
        self.vae = vae
        self.unet = unet
        self.null_embedding = null_embedding
        self.device = device


def load_diffusion_model(weights_root: str | Path, device: str = "cpu") -> DiffusionModel:
    """Load the denoising model from ``<weights_root>/sd``.

    Requires torch and diffusers; the directory is a standard pretrained
    snapshot (fetch it once with the fetch-weights command).
    """
    try:
        import torch
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as e:
        raise EnvironmentError_(
            "live diffusion extraction requires torch, diffusers and "
            "transformers (install the 'live' extra)"
        ) from e

    root = Path(weights_root) / SD_WEIGHTS_SUBDIR
    if not root.exists():
        raise EnvironmentError_(
            f"no diffusion weights at {root}; run: hierseg fetch-weights sd"
        )
    vae = AutoencoderKL.from_pretrained(root, subfolder="vae").to(device).eval()
    unet = UNet2DConditionModel.from_pretrained(root, subfolder="unet").to(device).eval()
    tokenizer = CLIPTokenizer.from_pretrained(root, subfolder="tokenizer")
    text_model = CLIPTextModel.from_pretrained(root, subfolder="text_encoder").to(device).eval()
    with torch.no_grad():
        ids = tokenizer([""], padding="max_length",
                        max_length=tokenizer.model_max_length,
                        return_tensors="pt").input_ids.to(device)
        null_embedding = text_model(ids)[0]
    return DiffusionModel(vae, unet, null_embedding, device)


def encode_and_noise(image: np.ndarray, cfg: ExtractionConfig,
                     model: DiffusionModel,
                     schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Encode an RGB image to latent space and noise it per the schedule.

    ``image`` is (H, W, 3) uint8 or float in [0, 255]; it is resized to the
    configured square input side before encoding.
    """
    import torch
    from PIL import Image

    schedule = schedule or NoiseSchedule()
    pil = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB")
    pil = pil.resize((cfg.input_side, cfg.input_side), Image.Resampling.BICUBIC)
    arr = np.asarray(pil, dtype=np.float32) / 127.5 - 1.0
    x = torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0).to(model.device)
    with torch.no_grad():
        latent = model.vae.encode(x).latent_dist.mean
        latent = latent * model.vae.config.scaling_factor
    return noise_latent(latent.cpu().numpy(), cfg, schedule)


def extract_attention(latent: np.ndarray, cfg: ExtractionConfig,
                      model: DiffusionModel,
                      schedule: NoiseSchedule | None = None) -> SDAttention:
    """Run one null-prompt denoising pass and collect the largest-L
    self-attention probability maps, merged per ``cfg.layer_combine``."""
    import torch

    schedule = schedule or NoiseSchedule()
    captured: list[np.ndarray] = []

    def make_processor(store):
        class CaptureProcessor:
            def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                         attention_mask=None, **kwargs):
                residual = hidden_states
                is_self = encoder_hidden_states is None
                ctx = hidden_states if is_self else encoder_hidden_states
                query = attn.to_q(hidden_states)
                key = attn.to_k(ctx)
                value = attn.to_v(ctx)
                query = attn.head_to_batch_dim(query)
                key = attn.head_to_batch_dim(key)
                value = attn.head_to_batch_dim(value)
                probs = attn.get_attention_scores(query, key, attention_mask)
                if is_self:
                    store.append(probs.detach().cpu().float().numpy())
                hidden_states = torch.bmm(probs, value)
                hidden_states = attn.batch_to_head_dim(hidden_states)
                hidden_states = attn.to_out[0](hidden_states)
                hidden_states = attn.to_out[1](hidden_states)
                if attn.residual_connection:
                    hidden_states = hidden_states + residual
                return hidden_states

        return CaptureProcessor()

    original = model.unet.attn_processors
    model.unet.set_attn_processor(make_processor(captured))
    try:
        t = timestep_for_index(cfg, schedule)
        x = torch.from_numpy(np.asarray(latent, dtype=np.float32)).to(model.device)
        with torch.no_grad():
            model.unet(x, t, encoder_hidden_states=model.null_embedding)
    finally:
        model.unet.set_attn_processor(original)

    if not captured:
        raise EnvironmentError_("no self-attention maps captured from the model")
    max_tokens = max(c.shape[-1] for c in captured)
    at_top = [c for c in captured if c.shape[-1] == max_tokens]
    combined = combine_block_maps(at_top, cfg.layer_combine)
    return attention_from_maps(combined.astype(np.float64))
