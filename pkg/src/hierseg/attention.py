"""Row-stochastic attention-map algebra.

Everything in this module is plain linear algebra on dense arrays: scaled
dot-product attention maps, self-self variants, per-layer averaging, head
chain multiplication, and score refinement. No model weights are involved,
so all operations are exactly reproducible from array inputs alone.

Conventions: T is the token count of a square map, maps act on row vectors
(row i holds the attention distribution of token i), and a map is called
stochastic when it is nonnegative with unit row sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError

# Absolute tolerances for stochasticity checks. Row sums are exactly 1 in
# exact arithmetic, so absolute (not relative) comparison is appropriate.
ROW_SUM_ATOL = 1e-5
CHAIN_ROW_SUM_ATOL = 1e-4
NONNEG_ATOL = 1e-6

SELF_SELF_MODES = ("query_query", "key_key", "value_value", "identity", "original")
AVERAGE_NORMALIZERS = ("count", "paper_literal")


def _as_float_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SquareMap:
    """A dense T-by-T map over tokens, optionally flagged row-stochastic.

    When ``stochastic`` is set, construction checks that all entries are
    nonnegative and every row sums to 1 within ``row_atol``.
    """

    data: np.ndarray
    stochastic: bool = False
    row_atol: float = ROW_SUM_ATOL

    def __post_init__(self):
        a = _as_float_matrix(self.data, "attention map")
        if a.shape[0] != a.shape[1]:
            raise ShapeError(f"attention map must be square, got shape {a.shape}")
        object.__setattr__(self, "data", a)
        if self.stochastic:
            if a.min() < -NONNEG_ATOL:
                raise ValidationError(
                    f"stochastic map has negative entry {a.min():.3e}"
                )
            sums = a.sum(axis=1)
            err = np.abs(sums - 1.0).max()
            if err > self.row_atol:
                raise ValidationError(
                    f"stochastic map row sums deviate by {err:.3e} "
                    f"(allowed {self.row_atol:.1e})"
                )

    @property
    def tokens(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class AttentionStack:
    """An ordered collection of same-sized square maps.

    ``axis_meaning`` records what the list enumerates: ``"layers"`` for one
    map per transformer block, ``"heads"`` for one map per attention head.
    Order is significant for head stacks because chain multiplication is
    order-sensitive.
    """

    maps: tuple[SquareMap, ...]
    axis_meaning: str

    def __post_init__(self):
        if self.axis_meaning not in ("layers", "heads"):
            raise ConfigurationError(
                f"axis_meaning must be 'layers' or 'heads', got {self.axis_meaning!r}"
            )
        object.__setattr__(self, "maps", tuple(self.maps))
        sizes = {m.tokens for m in self.maps}
        if len(sizes) > 1:
            raise ShapeError(f"stack mixes token counts: {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def tokens(self) -> int:
        if not self.maps:
            raise ValidationError("empty attention stack has no token count")
        return self.maps[0].tokens

    def as_array(self) -> np.ndarray:
        """Stack the maps into one (N, T, T) array."""
        if not self.maps:
            raise ValidationError("empty attention stack")
        return np.stack([m.data for m in self.maps])


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_attention(q: np.ndarray, k: np.ndarray, d: int) -> SquareMap:
    """Scaled dot-product attention map: row-softmax of q @ k.T / sqrt(d).

    ``q`` and ``k`` must share shape (T, d); the result is a stochastic
    (T, T) map.
    """
    q = _as_float_matrix(q, "q")
    k = _as_float_matrix(k, "k")
    if d <= 0:
        raise ValidationError(f"scale dimension must be positive, got {d}")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    if q.shape[1] != d:
        raise ShapeError(f"q has width {q.shape[1]}, expected d={d}")
    logits = q @ k.T / np.sqrt(float(d))
    return SquareMap(softmax_rows(logits), stochastic=True)


def self_self_map(mode: str, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  d: int) -> SquareMap:
    """Attention map built from one projection against itself.

    ``query_query``, ``key_key`` and ``value_value`` replace the usual
    query/key pairing with the named projection on both sides; ``identity``
    returns the T-by-T identity; ``original`` is plain softmax_attention(q, k).
    """
    if mode not in SELF_SELF_MODES:
        raise ConfigurationError(
            f"unknown self-self mode {mode!r}; expected one of {SELF_SELF_MODES}"
        )
    q = _as_float_matrix(q, "q")
    k = _as_float_matrix(k, "k")
    v = _as_float_matrix(v, "v")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(
            f"q {q.shape}, k {k.shape}, v {v.shape} must all match"
        )
    if mode == "identity":
        return SquareMap(np.eye(q.shape[0], dtype=q.dtype), stochastic=True)
    pair = {
        "query_query": (q, q),
        "key_key": (k, k),
        "value_value": (v, v),
        "original": (q, k),
    }[mode]
    return softmax_attention(pair[0], pair[1], d)


def average_maps(stack: AttentionStack, normalizer: str = "count") -> SquareMap:
    """Elementwise average of a stack of stochastic maps.

    ``count`` divides the sum of the N maps by N, giving a true mean that
    stays row-stochastic. ``paper_literal`` divides by N+1 instead, which
    reproduces a published normalization that sums one fewer term than its
    denominator; the result is then uniformly scaled by N/(N+1) and is not
    flagged stochastic.
    """
    if normalizer not in AVERAGE_NORMALIZERS:
        raise ConfigurationError(
            f"unknown normalizer {normalizer!r}; expected one of {AVERAGE_NORMALIZERS}"
        )
    if len(stack) == 0:
        raise ValidationError("cannot average an empty attention stack")
    for i, m in enumerate(stack.maps):
        if not m.stochastic:
            raise ValidationError(f"map {i} in stack is not flagged stochastic")
    total = stack.as_array().sum(axis=0)
    if normalizer == "count":
        return SquareMap(total / len(stack), stochastic=True)
    return SquareMap(total / (len(stack) + 1), stochastic=False)


def chain_multiply_heads(stack: AttentionStack) -> SquareMap:
    """Fuse per-head maps by left-to-right matrix chain multiplication.

    The product of row-stochastic matrices is row-stochastic, so the result
    is flagged stochastic with the relaxed tolerance used for accumulated
    products.
    """
    if len(stack) == 0:
        raise ValidationError("cannot chain-multiply an empty attention stack")
    if stack.axis_meaning != "heads":
        raise ValidationError(
            f"chain multiplication expects a head stack, got {stack.axis_meaning!r}"
        )
    for i, m in enumerate(stack.maps):
        if not m.stochastic:
            raise ValidationError(f"head {i} in stack is not flagged stochastic")
    product = stack.maps[0].data
    for m in stack.maps[1:]:
        product = product @ m.data
    return SquareMap(product, stochastic=True, row_atol=CHAIN_ROW_SUM_ATOL)


def refine_scores(attn: SquareMap, scores: np.ndarray) -> np.ndarray:
    """Propagate per-token scores through an attention map: attn @ scores.

    ``scores`` is (T, C) with one column per category. With a stochastic
    map every output entry is a convex combination of the input column, so
    per-column value ranges can only shrink.
    """
    s = _as_float_matrix(scores, "scores")
    if s.shape[0] != attn.tokens:
        raise ShapeError(
            f"scores have {s.shape[0]} rows but map covers {attn.tokens} tokens"
        )
    return attn.data @ s
