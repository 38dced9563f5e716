"""Whitespace tokenizer and a seeded word-embedding table."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..numerics import Tensor

START, MASK_TOKEN, PAD = "[START]", "[MASK]", "[PAD]"
SPECIALS = (START, MASK_TOKEN, PAD)
EMBED_DIM = 300

_WORD = re.compile(r"\[(?:start|mask|pad)\]|[a-z0-9']+")
_SPECIAL_CASE = {tok.lower(): tok for tok in SPECIALS}


def tokenize(sentence: str) -> list[str]:
    """Lowercase and split on anything that is not a word character.
    Bracketed special tokens survive intact."""
    return [_SPECIAL_CASE.get(tok, tok) for tok in _WORD.findall(sentence.lower())]


class Vocabulary:
    """Token ids with one embedding row per id.

    Rows are drawn from N(0, sigma^2) by a generator keyed on
    ``(seed, token id)``, so a row never depends on how many other
    tokens exist. Out-of-vocabulary lookups fall back to the [PAD] row and
    are tallied in ``oov_count``.
    """

    def __init__(self, tokens, seed: int = 0, dim: int = EMBED_DIM, sigma: float = 0.1):
        words = sorted(set(tokens) - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        self.dim = dim
        self.seed = seed
        self.table = np.stack([np.random.default_rng([seed, i]).normal(0.0, sigma, size=dim)
                               for i in range(len(self.itos))])
        self.oov_count = 0

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def ids(self, tokens) -> list[int]:
        out = []
        for tok in tokens:
            i = self.stoi.get(tok)
            if i is None:
                self.oov_count += 1
                i = self.stoi[PAD]
            out.append(i)
        return out

    def embed_tokens(self, tokens) -> Tensor:
        return Tensor(self.table[self.ids(tokens)])

    def load_vectors(self, path) -> int:
        """Override rows from a text file of ``word v1 ... v_dim`` lines.
        Returns the number of rows replaced."""
        replaced = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.rstrip().split(" ")
            if len(parts) != self.dim + 1:
                continue
            i = self.stoi.get(parts[0].lower())
            if i is None:
                continue
            self.table[i] = np.array([float(v) for v in parts[1:]])
            replaced += 1
        return replaced
