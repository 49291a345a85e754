"""Text tower: byte-pair tokenizer, causal transformer, prompt templates.

The tokenizer implements the byte-level BPE scheme used by the published
dual-encoder checkpoints: text is lowercased, whitespace-collapsed, split
by a word/number/punctuation pattern, mapped through a reversible byte to
unicode table, and merged greedily by rank. The vocabulary is derived from
the merge list itself (256 byte symbols, 256 word-final variants, one
token per merge, and two specials), so a bundle's merge file fully
determines its vocabulary.
"""

from __future__ import annotations

import gzip
import html
from functools import lru_cache
from pathlib import Path

import numpy as np
import regex as re

from .encoder import forward_block, layer_norm
from .errors import ValidationError
from .weights import TextWeights

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"

_WORD_PATTERN = re.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible mapping from byte values to printable unicode characters."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(ord("\xa1"), ord("\xac") + 1))
          + list(range(ord("\xae"), ord("\xff") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word[:-1], word[1:]))


def _clean(text: str) -> str:
    text = html.unescape(html.unescape(text))
    return " ".join(text.strip().split()).lower()


class BPETokenizer:
    """Byte-level BPE tokenizer driven by a merge-list file (.txt or .txt.gz).

    ``vocab_size`` pins the target vocabulary; the merge list is truncated
    to ``vocab_size - 514`` entries (512 byte symbols plus 2 specials make
    up the rest). Published merge files carry more merges than their paired
    checkpoints use, so the truncation is required for compatibility.
    """

    def __init__(self, merges_path: str | Path, vocab_size: int | None = None):
        p = Path(merges_path)
        if not p.exists():
            raise ValidationError(f"merge file not found: {p}")
        raw = gzip.open(p, "rt", encoding="utf-8").read() if p.suffix == ".gz" \
            else p.read_text(encoding="utf-8")
        lines = raw.split("\n")
        merges = [tuple(line.split()) for line in lines[1:] if len(line.split()) == 2]
        if vocab_size is not None:
            wanted = vocab_size - 512 - 2
            if wanted < 0 or wanted > len(merges):
                raise ValidationError(
                    f"vocabulary of {vocab_size} needs {wanted} merges, merge "
                    f"file provides {len(merges)}"
                )
            merges = merges[:wanted]

        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        vocab = list(self.byte_encoder.values())
        vocab += [v + "</w>" for v in vocab]
        vocab += ["".join(m) for m in merges]
        vocab += [SOT_TOKEN, EOT_TOKEN]
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.decoder = {i: tok for tok, i in self.encoder.items()}
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self.sot = self.encoder[SOT_TOKEN]
        self.eot = self.encoder[EOT_TOKEN]
        self._cache: dict[str, str] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def _bpe(self, token: str) -> str:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda pair: self.bpe_ranks.get(pair, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for token in re.findall(_WORD_PATTERN, _clean(text)):
            mapped = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self._bpe(mapped).split(" "))
        return ids

    def decode(self, ids: list[int]) -> str:
        text = "".join(self.decoder[i] for i in ids)
        data = bytearray(self.byte_decoder[c] for c in text if c in self.byte_decoder)
        return data.decode("utf-8", errors="replace").replace("</w>", " ").strip()


def tokenize_batch(tokenizer: BPETokenizer, texts: list[str],
                   context_length: int) -> np.ndarray:
    """Encode texts into a fixed-width id matrix with start/end markers.

    Over-long prompts are truncated so the end token is always present.
    """
    out = np.zeros((len(texts), context_length), dtype=np.int64)
    for row, text in enumerate(texts):
        ids = [tokenizer.sot] + tokenizer.encode(text) + [tokenizer.eot]
        if len(ids) > context_length:
            ids = ids[:context_length]
            ids[-1] = tokenizer.eot
        out[row, :len(ids)] = ids
    return out


class TextEncoder:
    """Causal transformer over token ids; pools at the end-of-text position."""

    def __init__(self, weights: TextWeights, tokenizer: BPETokenizer):
        if tokenizer.vocab_size != weights.vocab_size:
            raise ValidationError(
                f"tokenizer vocabulary ({tokenizer.vocab_size}) does not match "
                f"embedding table ({weights.vocab_size})"
            )
        self.weights = weights
        self.tokenizer = tokenizer

    def encode(self, texts: list[str]) -> np.ndarray:
        """Embed texts into the joint space; rows are not normalized here."""
        if not texts:
            raise ValidationError("no texts to encode")
        w = self.weights
        ids = tokenize_batch(self.tokenizer, texts, w.context_length)
        mask = np.triu(np.full((w.context_length, w.context_length), -np.inf,
                               dtype=np.float32), k=1)
        out = np.empty((len(texts), w.joint_dim), dtype=np.float32)
        for row in range(len(texts)):
            x = w.token_embedding[ids[row]] + w.pos_embedding
            for bw in w.blocks:
                x, _ = forward_block(x, bw, w.heads, gelu="quick",
                                     attn_bias=mask)
            x = layer_norm(x, w.ln_final_g, w.ln_final_b)
            eot_pos = int(np.argmax(ids[row] == self.tokenizer.eot))
            out[row] = x[eot_pos] @ w.proj
        return out


def load_text_encoder(bundle_dir: str | Path) -> TextEncoder:
    """Build a TextEncoder from a weight bundle directory."""
    from .weights import load_bundle

    _, _, text = load_bundle(bundle_dir)
    if text is None:
        raise ValidationError(f"bundle {bundle_dir} has no text tower")
    merges = Path(bundle_dir) / "bpe_merges.txt.gz"
    tokenizer = BPETokenizer(merges, vocab_size=text.vocab_size)
    return TextEncoder(text, tokenizer)


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

SINGLE_TEMPLATE = ("a photo of a {}.",)

# The standard 80-prompt ensemble used for zero-shot classification heads.
FULL80_TEMPLATES = (
    "a bad photo of a {}.",
    "a photo of many {}.",
    "a sculpture of a {}.",
    "a photo of the hard to see {}.",
    "a low resolution photo of the {}.",
    "a rendering of a {}.",
    "graffiti of a {}.",
    "a bad photo of the {}.",
    "a cropped photo of the {}.",
    "a tattoo of a {}.",
    "the embroidered {}.",
    "a photo of a hard to see {}.",
    "a bright photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a drawing of a {}.",
    "a photo of my {}.",
    "the plastic {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a black and white photo of the {}.",
    "a painting of the {}.",
    "a painting of a {}.",
    "a pixelated photo of the {}.",
    "a sculpture of the {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a plastic {}.",
    "a photo of the dirty {}.",
    "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a rendering of the {}.",
    "a {} in a video game.",
    "a photo of one {}.",
    "a doodle of a {}.",
    "a close-up photo of the {}.",
    "a photo of a {}.",
    "the origami {}.",
    "the {} in a video game.",
    "a sketch of a {}.",
    "a doodle of the {}.",
    "a origami {}.",
    "a low resolution photo of a {}.",
    "the toy {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a photo of a large {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a photo of a weird {}.",
    "a blurry photo of a {}.",
    "a cartoon {}.",
    "art of a {}.",
    "a sketch of the {}.",
    "a embroidered {}.",
    "a pixelated photo of a {}.",
    "itap of the {}.",
    "a jpeg corrupted photo of the {}.",
    "a good photo of a {}.",
    "a plushie {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "the cartoon {}.",
    "art of the {}.",
    "a drawing of the {}.",
    "a photo of the large {}.",
    "a black and white photo of a {}.",
    "the plushie {}.",
    "a dark photo of a {}.",
    "itap of a {}.",
    "graffiti of the {}.",
    "a toy {}.",
    "itap of my {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
    "a tattoo of the {}.",
)

TEMPLATE_SETS: dict[str, tuple[str, ...]] = {
    "single": SINGLE_TEMPLATE,
    "full80": FULL80_TEMPLATES,
}


def get_templates(set_id: str) -> tuple[str, ...]:
    try:
        return TEMPLATE_SETS[set_id]
    except KeyError:
        raise ValidationError(
            f"unknown template set {set_id!r}; expected one of {sorted(TEMPLATE_SETS)}"
        ) from None
