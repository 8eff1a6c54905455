"""Word-level vocabulary and tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

PAD, UNK = 0, 1
_PUNCT = re.compile(r"[^\w\s]")


def normalize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # tokens[i] has id i + 2

    def __len__(self) -> int:
        return len(self.tokens) + 2

    @cached_property
    def index(self) -> dict[str, int]:
        return {t: i + 2 for i, t in enumerate(self.tokens)}

    def token(self, i: int) -> str:
        if i == PAD:
            return "<pad>"
        if i == UNK:
            return "<unk>"
        return self.tokens[i - 2]


def build_vocab(questions: Iterable[str]) -> Vocabulary:
    return Vocabulary(tuple(sorted({w for q in questions for w in normalize(q)})))


def tokenize(question: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded ids and a mask that is True on real tokens."""
    words = normalize(question)
    if len(words) > max_len:
        raise ValueError(f"question has {len(words)} tokens, max_len is {max_len}")
    index = vocab.index
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(words)] = [index.get(w, UNK) for w in words]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(words)] = True
    return ids, mask


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.token(int(i)) for i in ids if int(i) != PAD)
