"""Pretrained word vectors in the whitespace text format."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParseError
from .text import PAD_ID, Vocabulary


class OovPolicy(str, enum.Enum):
    ZERO = "zero"
    RANDOM_PER_TOKEN = "random"


def token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Seed-determined vector for ``token``; same inputs, same draw."""
    rng = np.random.default_rng([int(seed), zlib.crc32(token.encode("utf-8"))])
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    vocab: Vocabulary
    oov_policy: OovPolicy = OovPolicy.ZERO
    seed: int = 0
    trainable: bool = False
    coverage: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector_for(self, token: str) -> np.ndarray:
        """Row for an in-vocabulary token, otherwise the OOV policy's vector."""
        idx = self.vocab.stoi.get(token)
        if idx is not None:
            return self.matrix[idx]
        if self.oov_policy is OovPolicy.ZERO:
            return np.zeros(self.dim)
        vec = self._cache.get(token)
        if vec is None:
            vec = self._cache[token] = token_vector(token, self.dim, self.seed)
        return vec

    @classmethod
    def random(cls, vocab: Vocabulary, dim: int, seed: int, trainable: bool = True) -> "EmbeddingMatrix":
        """Every row drawn per token (padding stays zero); for runs without pretrained vectors."""
        mat = np.stack([token_vector(t, dim, seed) for t in vocab.itos])
        mat[PAD_ID] = 0.0
        return cls(mat, vocab, OovPolicy.RANDOM_PER_TOKEN, seed, trainable, 0.0)


def load_embeddings(path, vocab: Vocabulary, dim: int, oov_policy=OovPolicy.ZERO,
                    seed: int = 0, trainable: bool = False) -> EmbeddingMatrix:
    oov_policy = OovPolicy(oov_policy)
    found: dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"expected 1 token and {dim} floats, got {len(parts) - 1} values",
                                 path=path, line=lineno)
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx == PAD_ID:
                continue
            try:
                found[idx] = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"bad float: {exc}", path=path, line=lineno) from exc

    mat = np.zeros((len(vocab), dim))
    for idx, token in enumerate(vocab.itos):
        if idx == PAD_ID:
            continue
        if idx in found:
            mat[idx] = found[idx]
        elif oov_policy is OovPolicy.RANDOM_PER_TOKEN:
            mat[idx] = token_vector(token, dim, seed)
    n_regular = len(vocab) - 3
    coverage = sum(1 for i in found if i >= 3) / n_regular if n_regular else 1.0
    return EmbeddingMatrix(mat, vocab, oov_policy, seed, trainable, coverage)


def save_embeddings(matrix: np.ndarray, tokens, path, skip: Optional[set] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(tokens, matrix):
            if skip and tok in skip:
                continue
            fh.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")
