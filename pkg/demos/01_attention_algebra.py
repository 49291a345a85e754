"""Walk through the attention-map algebra on small dense matrices.

Everything here runs on plain numpy arrays: scaled dot-product maps,
self-self variants, layer averaging, head chain multiplication, and score
refinement. Run it directly:

    python demos/01_attention_algebra.py
"""

import numpy as np

from hierseg.attention import (
    AttentionStack,
    SquareMap,
    average_maps,
    chain_multiply_heads,
    refine_scores,
    self_self_map,
    softmax_attention,
)

rng = np.random.default_rng(0)

# A scaled dot-product map is row-stochastic by construction.
T, D = 6, 4
q = rng.standard_normal((T, D))
k = rng.standard_normal((T, D))
attn = softmax_attention(q, k, D)
print("softmax attention rows sum to:", attn.data.sum(axis=1).round(6))

# Self-self variants replace the query/key pairing with one projection
# against itself; the identity variant removes mixing entirely.
v = rng.standard_normal((T, D))
for mode in ("original", "query_query", "key_key", "value_value", "identity"):
    m = self_self_map(mode, q, k, v, D)
    off_diag = m.data[~np.eye(T, dtype=bool)].mean()
    print(f"{mode:12s} mean off-diagonal weight {off_diag:.4f}")

# Averaging maps layer-by-layer keeps stochasticity under the true mean.
layers = AttentionStack(
    tuple(softmax_attention(rng.standard_normal((T, D)),
                            rng.standard_normal((T, D)), D) for _ in range(5)),
    axis_meaning="layers",
)
avg = average_maps(layers, "count")
lit = average_maps(layers, "paper_literal")
print("count-mean row sums:   ", avg.data.sum(axis=1).round(6))
print("literal-mean row sums: ", lit.data.sum(axis=1).round(6),
      "(scaled by N/(N+1))")

# Chain multiplication composes head maps. Products of row-stochastic
# matrices stay row-stochastic, and composition propagates weight along
# multi-hop paths: banded heads compose into a wider band, while weight
# still cannot cross a boundary no head crosses (demo 04 exploits that).
def local_band(width):
    m = np.eye(T) + width * (np.eye(T, k=1) + np.eye(T, k=-1))
    return SquareMap(m / m.sum(axis=1, keepdims=True), stochastic=True)

heads = AttentionStack((local_band(0.5), local_band(0.3), local_band(0.1)),
                       axis_meaning="heads")
fused = chain_multiply_heads(heads)
print("chain product row sums:", fused.data.sum(axis=1).round(6))
band_single = (heads.maps[0].data[0] > 1e-9).sum()
band_fused = (fused.data[0] > 1e-9).sum()
print(f"reachable tokens from token 0: one head {band_single}, "
      f"chained {band_fused}")

# Refinement propagates per-token category scores through a map. With a
# stochastic map every output is a convex combination, so per-category
# ranges can only contract.
scores = rng.standard_normal((T, 3)) * 5
refined = refine_scores(fused, scores)
for c in range(3):
    print(f"category {c}: range ({scores[:, c].min():+.2f}, "
          f"{scores[:, c].max():+.2f}) -> ({refined[:, c].min():+.2f}, "
          f"{refined[:, c].max():+.2f})")
