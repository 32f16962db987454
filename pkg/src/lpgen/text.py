"""Closed-vocabulary caption tokenizer and a trainable embedding table.

Stands in for a frozen pretrained text encoder at desk scale.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, gather_rows, mul

PAD, NULL = "<pad>", "<null>"

STYLE_WORDS = ["azure", "green", "golden", "splendor", "ink", "wash", "light", "vermilion"]
SCENE_WORDS = [
    "a", "an", "the", "of", "with", "in", "and", "under", "style", "landscape", "painting",
    "traditional", "layered", "mountains", "mountain", "distant", "ridges", "ridge", "mist",
    "misty", "rolling", "hills", "peaks", "sky", "valley", "river", "far", "near", "scenery",
    "soft", "colors",
]
VOCAB = [PAD, NULL] + STYLE_WORDS + SCENE_WORDS

MAX_TOKENS = 8
_SPLIT = re.compile(r"[^a-z]+")


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    pad_mask: tuple[bool, ...]


def default_vocab() -> dict[str, int]:
    return {w: i for i, w in enumerate(VOCAB)}


def tokenize(caption: str, vocab: dict[str, int] | None = None, length: int = MAX_TOKENS) -> TokenSeq:
    vocab = vocab or default_vocab()
    words = [w for w in _SPLIT.split(caption.lower()) if w in vocab and w not in (PAD, NULL)]
    ids = [vocab[w] for w in words[:length]] or [vocab[NULL]]
    pad = length - len(ids)
    return TokenSeq(tuple(ids) + (vocab[PAD],) * pad, (False,) * len(ids) + (True,) * pad)


def detokenize(ts: TokenSeq, vocab: dict[str, int] | None = None) -> str:
    inv = {i: w for w, i in (vocab or default_vocab()).items()}
    return " ".join(inv[i] for i, m in zip(ts.ids, ts.pad_mask) if not m and inv[i] != NULL)


def null_tokens(vocab: dict[str, int] | None = None, length: int = MAX_TOKENS) -> TokenSeq:
    return tokenize("", vocab, length)


class TextEmbedTable:
    def __init__(self, vocab: dict[str, int], table: Tensor):
        if table.shape[0] != len(vocab):
            raise ValueError(f"table has {table.shape[0]} rows for {len(vocab)} vocabulary entries")
        if NULL not in vocab:
            raise ValueError("vocabulary lacks the null token")
        self.vocab = vocab
        self.table = table

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, rng: Rng, width: int = 64, vocab: dict[str, int] | None = None) -> "TextEmbedTable":
        vocab = vocab or default_vocab()
        return cls(vocab, Tensor(rng.normal((len(vocab), width)), name="text.table"))


def ids_array(seqs: list[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.pad_mask for s in seqs], dtype=bool)
    return ids, mask


def embed(ts: TokenSeq | list[TokenSeq], table: TextEmbedTable) -> Tensor:
    """Row-gather from the table with padded rows zeroed; L×d, or B×L×d for a list."""
    seqs = [ts] if isinstance(ts, TokenSeq) else list(ts)
    ids, mask = ids_array(seqs)
    out = mul(gather_rows(table.table, ids), (~mask)[..., None].astype(np.float64))
    return out.reshape(out.shape[1:]) if isinstance(ts, TokenSeq) else out
