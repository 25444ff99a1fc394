"""Instruction text -> embedding sequence for cross-attention, with a reserved null condition."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor, nn

PAD, NULL, UNK = 0, 1, 2
RESERVED = {"<pad>": PAD, "<null>": NULL, "<unk>": UNK}
MAX_LENGTH = 32
MAX_CHARS = 512

_WORD = re.compile(r"[a-z0-9_]+")


def words(text: str) -> list[str]:
    """Lowercased word tokens; punctuation and quotes are separators."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, word_to_id: dict[str, int] | None = None):
        self.word_to_id = dict(RESERVED)
        for w, i in (word_to_id or {}).items():
            self.word_to_id.setdefault(w, i)
        ids = sorted(self.word_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be contiguous from 0")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        mapping: dict[str, int] = {}
        nxt = len(RESERVED)
        for text in texts:
            for w in words(text):
                if w not in mapping:
                    mapping[w] = nxt
                    nxt += 1
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.word_to_id)

    def to_dict(self) -> dict[str, int]:
        return dict(self.word_to_id)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    is_null: bool = False

    @property
    def length(self) -> int:
        return sum(1 for i in self.ids if i != PAD)

    def mask(self) -> list[bool]:
        return [i != PAD for i in self.ids]


@dataclass
class ConditionEmbedding:
    values: Tensor  # (L, D)
    mask: Tensor  # (L,) bool, False at PAD positions
    is_null: bool = False


def tokenize(instruction: str, vocab: Vocabulary, max_length: int = MAX_LENGTH) -> TokenSequence:
    """Map text to a fixed-length id sequence, padded at the tail.

    Empty text yields an all-PAD sequence flagged as the null condition.
    """
    if len(instruction) > MAX_CHARS:
        raise ValueError(f"instruction longer than {MAX_CHARS} characters")
    toks = [vocab.word_to_id.get(w, UNK) for w in words(instruction)][:max_length]
    ids = tuple(toks + [PAD] * (max_length - len(toks)))
    return TokenSequence(ids, is_null=not toks)


def null_tokens(max_length: int = MAX_LENGTH) -> TokenSequence:
    return TokenSequence((NULL,) * max_length, is_null=True)


class TextConditioner(nn.Module):
    """Learned embedding table over a dataset-derived vocabulary."""

    def __init__(self, vocab: Vocabulary, dim: int = 64, max_length: int = MAX_LENGTH):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_length = max_length
        self.table = nn.Embedding(len(vocab), dim)
        nn.init.normal_(self.table.weight, std=1.0)

    def tokenize(self, instruction: str) -> TokenSequence:
        return tokenize(instruction, self.vocab, self.max_length)

    def embed_ids(self, ids: Tensor) -> tuple[Tensor, Tensor]:
        """(B, L) ids -> ((B, L, D) embeddings, (B, L) attention mask)."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= len(self.vocab)):
            raise ValueError(f"token id out of range for vocabulary of size {len(self.vocab)}")
        return self.table(ids), ids != PAD

    def embed(self, tokens: TokenSequence) -> ConditionEmbedding:
        if tokens.is_null:
            return self.null_condition()
        ids = torch.tensor(tokens.ids, dtype=torch.long)
        values, mask = self.embed_ids(ids[None])
        return ConditionEmbedding(values[0], mask[0], is_null=False)

    def null_condition(self) -> ConditionEmbedding:
        """The unconditional embedding: the learned NULL vector on every position."""
        ids = torch.full((1, self.max_length), NULL, dtype=torch.long)
        values, mask = self.embed_ids(ids)
        return ConditionEmbedding(values[0], mask[0], is_null=True)

    def batch_ids(self, instructions: Sequence[str], drop: Sequence[bool] | None = None) -> Tensor:
        """Stack token ids for a batch; entries with ``drop[i]`` (or empty text) become null."""
        rows = []
        for i, text in enumerate(instructions):
            toks = self.tokenize(text)
            if toks.is_null or (drop is not None and drop[i]):
                toks = null_tokens(self.max_length)
            rows.append(toks.ids)
        return torch.tensor(rows, dtype=torch.long)

    def null_ids(self, batch: int) -> Tensor:
        return torch.full((batch, self.max_length), NULL, dtype=torch.long)
