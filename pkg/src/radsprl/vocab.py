"""Word/character vocabularies, embedding tables and pretrained-vector loading."""

from __future__ import annotations

import logging
import os
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .nn import embedding_uniform
from .preprocess import Instance

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

_DIGIT = re.compile(r"\d")


def normalize_word(token: str) -> str:
    """Lowercase and map every digit to ``0`` ("7th" -> "0th")."""
    return _DIGIT.sub("0", token.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def to_list(self) -> list[str]:
        """Non-reserved entries in index order."""
        return self.itos[2:]

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def _ordered(counts: Counter, min_freq: int) -> list[str]:
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return [tok for tok, _ in kept]


def build_vocab(instances: Sequence[Instance], min_freq: int = 1) -> tuple[Vocabulary, Vocabulary]:
    """Word vocabulary (normalized forms) and character vocabulary (original case).

    Entries are ordered by descending frequency, ties lexicographically.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if not instances:
        raise ValueError("cannot build vocabularies from an empty training set")
    words: Counter = Counter()
    chars: Counter = Counter()
    for inst in instances:
        for tok in inst.tokens:
            words[normalize_word(tok.text)] += 1
            chars.update(tok.text)
    return Vocabulary(_ordered(words, min_freq)), Vocabulary(_ordered(chars, 1))


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def random_table(vocab_size: int, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    """Uniform rows in +-sqrt(3/dim); the PAD row is zero."""
    m = embedding_uniform(rng, vocab_size, dim)
    m[PAD_ID] = 0.0
    return EmbeddingTable(m)


class EmbeddingDimensionError(ValueError):
    pass


def load_pretrained(
    path: str | os.PathLike,
    vocab: Vocabulary,
    dim: int,
    rng: np.random.Generator,
) -> EmbeddingTable:
    """Initialise a word table from a word2vec-style text file.

    Rows for vocabulary words found in the file are copied (first occurrence
    of each normalized form wins); all others come from :func:`random_table`
    drawn before any copying, so the random rows do not depend on file contents.
    """
    table = random_table(len(vocab), dim, rng)
    found: set[int] = set()
    malformed = 0
    first_vector = True
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                if int(parts[1]) != dim:
                    raise EmbeddingDimensionError(
                        f"{path}: file declares dimension {parts[1]}, expected {dim}"
                    )
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                if first_vector:
                    raise EmbeddingDimensionError(
                        f"{path}: line {lineno} has {len(values)} values, expected {dim}"
                    )
                malformed += 1
                log.warning("%s: line %d: expected %d values, got %d; skipped", path, lineno, dim, len(values))
                continue
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                malformed += 1
                log.warning("%s: line %d: non-numeric value; skipped", path, lineno)
                continue
            first_vector = False
            idx = vocab.stoi.get(normalize_word(word))
            if idx is None or idx in found or idx == PAD_ID:
                continue
            table.matrix[idx] = vec
            found.add(idx)
    log.info("pretrained vectors found for %d of %d words", len(found), len(vocab) - 2)
    return table


@dataclass(frozen=True)
class TokenEncoding:
    word_index: int
    char_indices: tuple[int, ...]
    indicator_flag: int


def encode_instance(
    instance: Instance, word_vocab: Vocabulary, char_vocab: Vocabulary
) -> list[TokenEncoding]:
    return [
        TokenEncoding(
            word_index=word_vocab[normalize_word(tok.text)],
            char_indices=tuple(char_vocab[ch] for ch in tok.text),
            indicator_flag=int(flag),
        )
        for tok, flag in zip(instance.tokens, instance.indicator_flags)
    ]
