"""From category names to a labeled grid, with a miniature text tower.

Shows category files with synonyms and a background group, prompt-template
ensembling, cosine scoring of fused patch embeddings, and both labeling
strategies.

    python demos/03_coarse_scoring.py
"""

import tempfile
from pathlib import Path

import numpy as np

from hierseg.encoder import preprocess, toy_encoder, trace_forward
from hierseg.fusion import FusionConfig, fuse
from hierseg.scoring import (
    CategorySet,
    assign_labels,
    embed_categories,
    similarity_scores,
)
from hierseg.textenc import BPETokenizer, TextEncoder
from hierseg.weights import TOY_MERGES, make_toy_text, toy_vocab_size

rng = np.random.default_rng(2)

# Category lists are plain text: one category per line, commas separate
# synonyms, and a leading '!' marks the background group.
with tempfile.TemporaryDirectory() as tmp:
    class_file = Path(tmp) / "classes.txt"
    class_file.write_text(
        "!background\n"
        "cat\n"
        "dog, puppy\n"
        "sky\n"
    )
    cats = CategorySet.from_file(class_file, template_set="single")
print("categories:", cats.names, "| background:", cats.background)

# A toy text tower: tokenizer built from a six-merge BPE list plus a tiny
# causal transformer. Real bundles swap in published weights, nothing else
# changes.
with tempfile.TemporaryDirectory() as tmp:
    merges = Path(tmp) / "merges.txt"
    merges.write_text(TOY_MERGES)
    tokenizer = BPETokenizer(merges)
text_encoder = TextEncoder(
    make_toy_text(vocab_size=toy_vocab_size(), width=16, heads=4,
                  joint_dim=6, seed=3),
    tokenizer,
)
print("tokenized 'a photo of a cat.':", tokenizer.encode("a photo of a cat."))

embeddings = embed_categories(cats, text_encoder, include_background_row=True)
print("text embedding rows:", embeddings.matrix.shape,
      "| unit norms:", np.linalg.norm(embeddings.matrix, axis=1).round(5))

# Fused patch embeddings from the toy image tower.
handle = toy_encoder(seed=0, depth=3, width=16, heads=4, patch_size=8,
                     joint_dim=6)
image = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
pixels = preprocess(image, handle, short_side=16)
outputs = fuse(trace_forward(handle, pixels), FusionConfig())

smap = similarity_scores(outputs, embeddings)
print("score map:", smap.scores.shape,
      f"values in [{smap.scores.min():.3f}, {smap.scores.max():.3f}]")

# Two ways to decide background: an explicit background prompt competing
# in the argmax, or a softmax-confidence threshold.
by_prompt = assign_labels(smap, "background_prompt")
by_threshold = assign_labels(smap, "softmax_threshold",
                             temperature=0.01, threshold=0.5)
print("labels via background prompt:\n", by_prompt)
print("labels via softmax threshold:\n", by_threshold)
print("(0 = background, then", dict(enumerate(cats.names, start=1)), ")")
