"""Sharpen a coarse score map with locality-preserving attention.

A blurred two-class score map stands in for the coarse output, and a
synthetic head stack with strong local structure stands in for diffusion
self-attention. Chain-multiplying the heads and propagating the scores
through the fused map recovers a crisper boundary; the figure written to
demo_out/ shows coarse vs refined side by side.

    python demos/04_detail_refinement.py
"""

from pathlib import Path

import numpy as np

from hierseg.compensation import compensate, fuse_heads
from hierseg.diffusion import attention_from_maps
from hierseg.interp import bilinear_resize
from hierseg.scoring import CategorySet, ScoreMap

rng = np.random.default_rng(3)

# Ground-truth structure: a sharp diagonal boundary at 16x16.
side = 16
yy, xx = np.mgrid[0:side, 0:side]
true_mask = (xx + 0.6 * yy) > 14

# The "coarse" map: the mask heavily blurred and downsampled to 8x8.
sharp = np.where(true_mask, 1.0, -1.0)
coarse8 = bilinear_resize(bilinear_resize(sharp, 4, 4), 8, 8)
cats = CategorySet.from_names(["object", "rest"])
coarse = ScoreMap(
    np.stack([coarse8, -coarse8], axis=2).astype(np.float32), cats
)

# Synthetic heads at 16x16 tokens: each row attends to spatial neighbors
# on the same side of the boundary, mimicking detail-preserving attention.
tokens = side * side
flat_mask = true_mask.reshape(-1)
coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1).astype(float)


def locality_head(bandwidth):
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    same_side = flat_mask[:, None] == flat_mask[None, :]
    logits = -d2 / (2 * bandwidth ** 2)
    logits[~same_side] -= 8.0
    m = np.exp(logits - logits.max(axis=1, keepdims=True))
    return m / m.sum(axis=1, keepdims=True)


att = attention_from_maps(np.stack([locality_head(b) for b in (2.0, 3.0, 4.0)]))
print(f"synthetic attention: {att.heads} heads over {att.tokens} tokens")

result = compensate(coarse, att, out_hw=(side, side))
pred_coarse = bilinear_resize(coarse.scores, side, side).argmax(axis=2) == 0
pred_refined = result.final.scores.argmax(axis=2) == 0

acc_coarse = (pred_coarse == true_mask).mean()
acc_refined = (pred_refined == true_mask).mean()
print(f"boundary agreement: coarse {acc_coarse:.1%} -> refined {acc_refined:.1%}")

for strategy in ("multiplication", "mean", "single"):
    fused = fuse_heads(att, strategy=strategy)
    print(f"  {strategy:14s} diagonal mass {np.diag(fused.data).mean():.3f}")

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 4, figsize=(12, 3))
    for ax, (title, img) in zip(axes, [
        ("true boundary", true_mask),
        ("coarse scores", bilinear_resize(coarse.scores, side, side)[:, :, 0]),
        ("refined scores", result.final.scores[:, :, 0]),
        ("refined labels", pred_refined),
    ]):
        ax.imshow(img, cmap="RdBu_r")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "detail_refinement.png", dpi=120)
    print(f"figure written to {out_dir / 'detail_refinement.png'}")
except ImportError:
    print("matplotlib not installed; skipped the figure")
