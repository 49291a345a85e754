"""Weight bundles for the contrastive encoder towers.

A bundle is a directory ``weights/<backbone_id>/`` containing:

* ``manifest.json``  - architecture constants, normalization statistics,
  source URL and per-file checksums;
* ``visual.npz``     - image-tower arrays;
* ``text.npz``       - text-tower arrays;
* ``bpe_merges.txt.gz`` - byte-pair merge list for the tokenizer.

All projection matrices are stored in (out_features, in_features) layout,
float32. Bundles are produced either by converting a published checkpoint
(``convert_checkpoint`` / the ``fetch-weights`` command, which needs torch)
or synthetically via the ``make_toy_*`` helpers used in tests and demos.
No network access happens at inference time.
"""

from __future__ import annotations

import hashlib
import json
import os
import urllib.request
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import EnvironmentError_, ShapeError, ValidationError

WEIGHTS_ENV_VAR = "HIERSEG_WEIGHTS"


def weights_root(explicit: str | None = None) -> Path:
    """Resolve the weights directory: explicit path > env var > ./weights."""
    if explicit:
        return Path(explicit)
    if os.environ.get(WEIGHTS_ENV_VAR):
        return Path(os.environ[WEIGHTS_ENV_VAR])
    return Path("weights")


# ---------------------------------------------------------------------------
# Weight structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockWeights:
    """One pre-norm transformer block (attention + MLP)."""

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_mlp_in: np.ndarray
    b_mlp_in: np.ndarray
    w_mlp_out: np.ndarray
    b_mlp_out: np.ndarray


@dataclass(frozen=True)
class LastBlockWeights:
    """The pieces of the final block used by the modified forward pass.

    Carries the pre-attention normalization, the q/k/v projections (q and k
    are needed only by the self-self ablation modes), the attention output
    projection, the closing normalization and the projection into the joint
    text-image space.
    """

    ln_g: np.ndarray
    ln_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln_post_g: np.ndarray
    ln_post_b: np.ndarray
    proj: np.ndarray

    @property
    def width(self) -> int:
        return self.w_v.shape[1]

    @property
    def joint_dim(self) -> int:
        return self.proj.shape[1]


@dataclass(frozen=True)
class VisionWeights:
    """Image tower: patch embedding, positional table, blocks, projection."""

    patch_kernel: np.ndarray      # (D, 3 * P * P), rows are flattened (c, y, x)
    class_embedding: np.ndarray   # (D,)
    pos_embedding: np.ndarray     # (1 + g0h * g0w, D)
    ln_pre_g: np.ndarray
    ln_pre_b: np.ndarray
    blocks: tuple[BlockWeights, ...]
    ln_post_g: np.ndarray
    ln_post_b: np.ndarray
    proj: np.ndarray              # (D, joint_dim)
    patch_size: int
    heads: int
    grid0: tuple[int, int]        # positional-table grid

    def __post_init__(self):
        d = self.class_embedding.shape[0]
        if self.patch_kernel.shape != (d, 3 * self.patch_size ** 2):
            raise ShapeError(
                f"patch kernel shape {self.patch_kernel.shape} inconsistent with "
                f"width {d} and patch size {self.patch_size}"
            )
        if self.pos_embedding.shape != (1 + self.grid0[0] * self.grid0[1], d):
            raise ShapeError(
                f"positional table shape {self.pos_embedding.shape} inconsistent "
                f"with grid {self.grid0}"
            )
        if d % self.heads != 0:
            raise ShapeError(f"width {d} not divisible by {self.heads} heads")
        if self.proj.shape[0] != d:
            raise ShapeError("joint projection rows must equal width")

    @property
    def width(self) -> int:
        return self.class_embedding.shape[0]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def joint_dim(self) -> int:
        return self.proj.shape[1]

    def last_block(self) -> LastBlockWeights:
        b = self.blocks[-1]
        return LastBlockWeights(
            ln_g=b.ln1_g, ln_b=b.ln1_b,
            w_q=b.w_q, b_q=b.b_q, w_k=b.w_k, b_k=b.b_k, w_v=b.w_v, b_v=b.b_v,
            w_o=b.w_o, b_o=b.b_o,
            ln_post_g=self.ln_post_g, ln_post_b=self.ln_post_b,
            proj=self.proj,
        )


@dataclass(frozen=True)
class TextWeights:
    """Text tower: token/positional embeddings, causal blocks, projection."""

    token_embedding: np.ndarray   # (vocab, D)
    pos_embedding: np.ndarray     # (context_length, D)
    blocks: tuple[BlockWeights, ...]
    ln_final_g: np.ndarray
    ln_final_b: np.ndarray
    proj: np.ndarray              # (D, joint_dim)
    heads: int

    @property
    def width(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def context_length(self) -> int:
        return self.pos_embedding.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def joint_dim(self) -> int:
        return self.proj.shape[1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_BLOCK_FIELDS = [f.name for f in fields(BlockWeights)]


def _blocks_to_arrays(blocks: tuple[BlockWeights, ...], out: dict) -> None:
    for i, b in enumerate(blocks):
        for name in _BLOCK_FIELDS:
            out[f"blocks.{i}.{name}"] = getattr(b, name)


def _blocks_from_arrays(arrays: dict) -> tuple[BlockWeights, ...]:
    depth = 0
    while f"blocks.{depth}.ln1_g" in arrays:
        depth += 1
    if depth == 0:
        raise ValidationError("bundle contains no transformer blocks")
    return tuple(
        BlockWeights(**{name: arrays[f"blocks.{i}.{name}"] for name in _BLOCK_FIELDS})
        for i in range(depth)
    )


def vision_to_arrays(vw: VisionWeights) -> dict[str, np.ndarray]:
    out = {
        "patch_kernel": vw.patch_kernel,
        "class_embedding": vw.class_embedding,
        "pos_embedding": vw.pos_embedding,
        "ln_pre_g": vw.ln_pre_g,
        "ln_pre_b": vw.ln_pre_b,
        "ln_post_g": vw.ln_post_g,
        "ln_post_b": vw.ln_post_b,
        "proj": vw.proj,
        "patch_size": np.asarray(vw.patch_size),
        "heads": np.asarray(vw.heads),
        "grid0": np.asarray(vw.grid0),
    }
    _blocks_to_arrays(vw.blocks, out)
    return out


def vision_from_arrays(arrays: dict) -> VisionWeights:
    return VisionWeights(
        patch_kernel=arrays["patch_kernel"],
        class_embedding=arrays["class_embedding"],
        pos_embedding=arrays["pos_embedding"],
        ln_pre_g=arrays["ln_pre_g"],
        ln_pre_b=arrays["ln_pre_b"],
        blocks=_blocks_from_arrays(arrays),
        ln_post_g=arrays["ln_post_g"],
        ln_post_b=arrays["ln_post_b"],
        proj=arrays["proj"],
        patch_size=int(arrays["patch_size"]),
        heads=int(arrays["heads"]),
        grid0=(int(arrays["grid0"][0]), int(arrays["grid0"][1])),
    )


def text_to_arrays(tw: TextWeights) -> dict[str, np.ndarray]:
    out = {
        "token_embedding": tw.token_embedding,
        "pos_embedding": tw.pos_embedding,
        "ln_final_g": tw.ln_final_g,
        "ln_final_b": tw.ln_final_b,
        "proj": tw.proj,
        "heads": np.asarray(tw.heads),
    }
    _blocks_to_arrays(tw.blocks, out)
    return out


def text_from_arrays(arrays: dict) -> TextWeights:
    return TextWeights(
        token_embedding=arrays["token_embedding"],
        pos_embedding=arrays["pos_embedding"],
        blocks=_blocks_from_arrays(arrays),
        ln_final_g=arrays["ln_final_g"],
        ln_final_b=arrays["ln_final_b"],
        proj=arrays["proj"],
        heads=int(arrays["heads"]),
    )


def _save_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    cast = {}
    for k, v in arrays.items():
        a = np.asarray(v)
        cast[k] = a.astype("<f4") if a.dtype.kind == "f" else a
    np.savez(path, **cast)


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_bundle(bundle_dir: str | os.PathLike, manifest: dict,
                vision: VisionWeights, text: TextWeights | None = None,
                merges_bytes: bytes | None = None) -> Path:
    """Write a complete weight bundle and its manifest."""
    d = Path(bundle_dir)
    d.mkdir(parents=True, exist_ok=True)
    _save_npz(d / "visual.npz", vision_to_arrays(vision))
    file_list = ["visual.npz"]
    if text is not None:
        _save_npz(d / "text.npz", text_to_arrays(text))
        file_list.append("text.npz")
    if merges_bytes is not None:
        (d / "bpe_merges.txt.gz").write_bytes(merges_bytes)
        file_list.append("bpe_merges.txt.gz")
    manifest = dict(manifest)
    manifest["files"] = {name: sha256_of(d / name) for name in file_list}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_bundle(bundle_dir: str | os.PathLike):
    """Load (manifest, VisionWeights, TextWeights-or-None) from a bundle dir."""
    d = Path(bundle_dir)
    mf = d / "manifest.json"
    if not mf.exists():
        raise EnvironmentError_(
            f"no weight bundle at {d} (missing manifest.json); "
            f"run the fetch-weights command or point {WEIGHTS_ENV_VAR} at a weights directory"
        )
    manifest = json.loads(mf.read_text())
    with np.load(d / "visual.npz") as z:
        vision = vision_from_arrays({k: z[k] for k in z.files})
    text = None
    if (d / "text.npz").exists():
        with np.load(d / "text.npz") as z:
            text = text_from_arrays({k: z[k] for k in z.files})
    return manifest, vision, text


# ---------------------------------------------------------------------------
# Synthetic bundles for tests and demos
# ---------------------------------------------------------------------------

def _toy_block(rng: np.random.Generator, d: int, scale: float = 0.25) -> BlockWeights:
    def lin(n_out, n_in):
        return (rng.standard_normal((n_out, n_in)) * scale / np.sqrt(n_in)).astype(np.float32)

    def vec(n, s=0.02):
        return (rng.standard_normal(n) * s).astype(np.float32)

    return BlockWeights(
        ln1_g=(1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32),
        ln1_b=vec(d),
        w_q=lin(d, d), b_q=vec(d),
        w_k=lin(d, d), b_k=vec(d),
        w_v=lin(d, d), b_v=vec(d),
        w_o=lin(d, d), b_o=vec(d),
        ln2_g=(1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32),
        ln2_b=vec(d),
        w_mlp_in=lin(4 * d, d), b_mlp_in=vec(4 * d),
        w_mlp_out=lin(d, 4 * d), b_mlp_out=vec(d),
    )


def make_toy_vision(depth: int = 2, width: int = 8, heads: int = 2,
                    patch_size: int = 8, joint_dim: int = 6,
                    grid0: tuple[int, int] = (2, 2), seed: int = 0) -> VisionWeights:
    rng = np.random.default_rng(seed)
    d = width
    return VisionWeights(
        patch_kernel=(rng.standard_normal((d, 3 * patch_size ** 2)) * 0.02).astype(np.float32),
        class_embedding=(rng.standard_normal(d) * 0.1).astype(np.float32),
        pos_embedding=(rng.standard_normal((1 + grid0[0] * grid0[1], d)) * 0.1).astype(np.float32),
        ln_pre_g=(1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32),
        ln_pre_b=(rng.standard_normal(d) * 0.02).astype(np.float32),
        blocks=tuple(_toy_block(rng, d) for _ in range(depth)),
        ln_post_g=(1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32),
        ln_post_b=(rng.standard_normal(d) * 0.02).astype(np.float32),
        proj=(rng.standard_normal((d, joint_dim)) * 0.2).astype(np.float32),
        patch_size=patch_size,
        heads=heads,
        grid0=grid0,
    )


def make_toy_text(vocab_size: int, width: int = 8, heads: int = 2, depth: int = 2,
                  context_length: int = 16, joint_dim: int = 6,
                  seed: int = 1) -> TextWeights:
    rng = np.random.default_rng(seed)
    d = width
    return TextWeights(
        token_embedding=(rng.standard_normal((vocab_size, d)) * 0.1).astype(np.float32),
        pos_embedding=(rng.standard_normal((context_length, d)) * 0.05).astype(np.float32),
        blocks=tuple(_toy_block(rng, d) for _ in range(depth)),
        ln_final_g=(1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32),
        ln_final_b=(rng.standard_normal(d) * 0.02).astype(np.float32),
        proj=(rng.standard_normal((d, joint_dim)) * 0.2).astype(np.float32),
        heads=heads,
    )


TOY_MERGES = "toy-merges v1\nc a\nca t</w>\nd o\ndo g</w>\ns k\nsk y</w>\n"


def make_toy_merges_bytes() -> bytes:
    import gzip
    return gzip.compress(TOY_MERGES.encode("utf-8"))


def toy_vocab_size(n_merges: int = 6) -> int:
    # 256 base byte symbols, 256 word-final variants, merges, two specials.
    return 256 + 256 + n_merges + 2


def make_toy_bundle(bundle_dir: str | os.PathLike, seed: int = 0,
                    depth: int = 2, width: int = 8, heads: int = 2,
                    patch_size: int = 8, joint_dim: int = 6) -> Path:
    """Write a fully functional miniature bundle for tests and demos."""
    vision = make_toy_vision(depth=depth, width=width, heads=heads,
                             patch_size=patch_size, joint_dim=joint_dim, seed=seed)
    text = make_toy_text(vocab_size=toy_vocab_size(), width=width, heads=heads,
                         depth=depth, joint_dim=joint_dim, seed=seed + 1)
    manifest = {
        "backbone_id": "toy",
        "patch_size": patch_size,
        "depth": depth,
        "width": width,
        "heads": heads,
        "joint_dim": joint_dim,
        "native_grid": [2, 2],
        "image_mean": [0.5, 0.5, 0.5],
        "image_std": [0.5, 0.5, 0.5],
        "gelu": "quick",
        "context_length": text.context_length,
        "source_url": "synthetic",
        "seed": seed,
    }
    return save_bundle(bundle_dir, manifest, vision, text, make_toy_merges_bytes())


# ---------------------------------------------------------------------------
# Published backbones: registry, download, conversion
# ---------------------------------------------------------------------------

BACKBONES = {
    "vit_b_16": {
        "patch_size": 16, "depth": 12, "width": 768, "heads": 12,
        "joint_dim": 512, "native_grid": [14, 14],
        "text_width": 512, "text_heads": 8, "text_depth": 12,
        "checkpoint_url": (
            "https://openaipublic.azureedge.net/clip/models/"
            "5806e77cd80f8b59890b7e101eabd078d9fb84e6937f9e85e4ecb61988df416f/ViT-B-16.pt"
        ),
    },
    "vit_l_14": {
        "patch_size": 14, "depth": 24, "width": 1024, "heads": 16,
        "joint_dim": 768, "native_grid": [16, 16],
        "text_width": 768, "text_heads": 12, "text_depth": 12,
        "checkpoint_url": (
            "https://openaipublic.azureedge.net/clip/models/"
            "b8cca3fd41ae0c99ba7e8951adf17d267cdb84cd88be6f7c2e0eca1737a03836/ViT-L-14.pt"
        ),
    },
}

MERGES_URL = "https://github.com/openai/CLIP/raw/main/clip/bpe_simple_vocab_16e6.txt.gz"

# Published channel statistics of the contrastive encoder's preprocessing.
CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


def _split_in_proj(w: np.ndarray, b: np.ndarray, d: int):
    return (w[:d], b[:d]), (w[d:2 * d], b[d:2 * d]), (w[2 * d:], b[2 * d:])


def _convert_blocks(state: dict[str, np.ndarray], prefix: str, depth: int,
                    d: int) -> tuple[BlockWeights, ...]:
    blocks = []
    for i in range(depth):
        p = f"{prefix}.resblocks.{i}"
        (wq, bq), (wk, bk), (wv, bv) = _split_in_proj(
            state[f"{p}.attn.in_proj_weight"], state[f"{p}.attn.in_proj_bias"], d
        )
        blocks.append(BlockWeights(
            ln1_g=state[f"{p}.ln_1.weight"], ln1_b=state[f"{p}.ln_1.bias"],
            w_q=wq, b_q=bq, w_k=wk, b_k=bk, w_v=wv, b_v=bv,
            w_o=state[f"{p}.attn.out_proj.weight"], b_o=state[f"{p}.attn.out_proj.bias"],
            ln2_g=state[f"{p}.ln_2.weight"], ln2_b=state[f"{p}.ln_2.bias"],
            w_mlp_in=state[f"{p}.mlp.c_fc.weight"], b_mlp_in=state[f"{p}.mlp.c_fc.bias"],
            w_mlp_out=state[f"{p}.mlp.c_proj.weight"], b_mlp_out=state[f"{p}.mlp.c_proj.bias"],
        ))
    return tuple(blocks)


def convert_checkpoint(state: dict[str, np.ndarray], backbone_id: str):
    """Convert a published dual-encoder checkpoint into bundle structures.

    ``state`` maps checkpoint keys to float numpy arrays. Returns
    (VisionWeights, TextWeights, manifest-dict).
    """
    if backbone_id not in BACKBONES:
        raise ValidationError(f"unknown backbone id {backbone_id!r}")
    spec = BACKBONES[backbone_id]
    d = spec["width"]

    conv = state["visual.conv1.weight"]
    if conv.shape != (d, 3, spec["patch_size"], spec["patch_size"]):
        raise ShapeError(
            f"checkpoint patch kernel {conv.shape} does not match backbone "
            f"{backbone_id} (width {d}, patch {spec['patch_size']})"
        )
    vision = VisionWeights(
        patch_kernel=conv.reshape(d, -1),
        class_embedding=state["visual.class_embedding"],
        pos_embedding=state["visual.positional_embedding"],
        ln_pre_g=state["visual.ln_pre.weight"], ln_pre_b=state["visual.ln_pre.bias"],
        blocks=_convert_blocks(state, "visual.transformer", spec["depth"], d),
        ln_post_g=state["visual.ln_post.weight"], ln_post_b=state["visual.ln_post.bias"],
        proj=state["visual.proj"],
        patch_size=spec["patch_size"],
        heads=spec["heads"],
        grid0=tuple(spec["native_grid"]),
    )
    dt = spec["text_width"]
    text = TextWeights(
        token_embedding=state["token_embedding.weight"],
        pos_embedding=state["positional_embedding"],
        blocks=_convert_blocks(state, "transformer", spec["text_depth"], dt),
        ln_final_g=state["ln_final.weight"], ln_final_b=state["ln_final.bias"],
        proj=state["text_projection"],
        heads=spec["text_heads"],
    )
    manifest = {
        "backbone_id": backbone_id,
        "patch_size": spec["patch_size"],
        "depth": spec["depth"],
        "width": d,
        "heads": spec["heads"],
        "joint_dim": spec["joint_dim"],
        "native_grid": spec["native_grid"],
        "image_mean": list(CLIP_IMAGE_MEAN),
        "image_std": list(CLIP_IMAGE_STD),
        "gelu": "quick",
        "context_length": int(text.context_length),
        "source_url": spec["checkpoint_url"],
    }
    return vision, text, manifest


def _torch_state_to_numpy(path: Path) -> dict[str, np.ndarray]:
    try:
        import torch
    except ImportError as e:
        raise EnvironmentError_(
            "converting a checkpoint requires torch (install the 'live' extra)"
        ) from e
    try:
        model = torch.jit.load(str(path), map_location="cpu")
        sd = model.state_dict()
    except RuntimeError:
        sd = torch.load(str(path), map_location="cpu", weights_only=False)
        if hasattr(sd, "state_dict"):
            sd = sd.state_dict()
    return {k: v.float().numpy() for k, v in sd.items() if hasattr(v, "numpy")}


def _download(url: str, dest: Path) -> Path:
    dest.parent.mkdir(parents=True, exist_ok=True)
    try:
        with urllib.request.urlopen(url) as resp, open(dest, "wb") as f:
            while True:
                chunk = resp.read(1 << 20)
                if not chunk:
                    break
                f.write(chunk)
    except OSError as e:
        raise EnvironmentError_(f"download failed for {url}: {e}") from e
    return dest


def fetch_backbone(backbone_id: str, root: str | os.PathLike,
                   checkpoint: str | None = None) -> Path:
    """Produce a ready bundle under ``root/<backbone_id>``.

    ``checkpoint`` may point at an already-downloaded file; otherwise the
    registered URL is fetched. The embedded hash in the published URL is
    verified against the downloaded file.
    """
    if backbone_id not in BACKBONES:
        raise ValidationError(f"unknown backbone id {backbone_id!r}")
    root = Path(root)
    spec = BACKBONES[backbone_id]
    if checkpoint:
        ckpt = Path(checkpoint)
        if not ckpt.exists():
            raise EnvironmentError_(f"checkpoint file not found: {ckpt}")
    else:
        ckpt = root / "_downloads" / Path(spec["checkpoint_url"]).name
        if not ckpt.exists():
            _download(spec["checkpoint_url"], ckpt)
        expected = Path(spec["checkpoint_url"]).parent.name
        got = sha256_of(ckpt)
        if got != expected:
            raise EnvironmentError_(
                f"checksum mismatch for {ckpt.name}: expected {expected}, got {got}"
            )
    state = _torch_state_to_numpy(ckpt)
    vision, text, manifest = convert_checkpoint(state, backbone_id)

    merges = root / "_downloads" / "bpe_simple_vocab_16e6.txt.gz"
    if not merges.exists():
        _download(MERGES_URL, merges)
    return save_bundle(root / backbone_id, manifest, vision, text,
                       merges.read_bytes())
