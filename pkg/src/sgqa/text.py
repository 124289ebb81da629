"""Tokenization, sentence segmentation, passages and vocabularies."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractError

PUNCTUATION = frozenset(".,!?;:'\"()")
TERMINATORS = frozenset(".!?")
ABBREVIATIONS = frozenset({"mr", "mrs", "dr", "st", "vs", "etc", "e.g", "i.e"})

PAD, UNK, PLACEHOLDER = "<pad>", "<unk>", "@placeholder"
PAD_ID, UNK_ID, PLACEHOLDER_ID = 0, 1, 2

_CHUNK = re.compile(r"\S+")


class Token(NamedTuple):
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Whitespace split with leading/trailing punctuation detached.

    Every punctuation character at a word edge becomes its own token, so
    ``"(yes)."`` yields ``( yes ) .``. Hyphens and apostrophes inside a word
    are kept.
    """
    tokens: list[Token] = []
    for m in _CHUNK.finditer(text):
        chunk, base = m.group(), m.start()
        lo, hi = 0, len(chunk)
        while lo < hi and chunk[lo] in PUNCTUATION:
            lo += 1
        if lo == hi:
            tokens.extend(Token(ch, base + k, base + k + 1) for k, ch in enumerate(chunk))
            continue
        while chunk[hi - 1] in PUNCTUATION:
            hi -= 1
        tokens.extend(Token(chunk[k], base + k, base + k + 1) for k in range(lo))
        tokens.append(Token(chunk[lo:hi], base + lo, base + hi))
        tokens.extend(Token(chunk[k], base + k, base + k + 1) for k in range(hi, len(chunk)))
    return tokens


def detokenize(tokens: Sequence[Token]) -> str:
    """Rebuild text from offsets; gaps become single spaces."""
    out, pos = [], None
    for tok in tokens:
        if pos is not None and tok.start > pos:
            out.append(" ")
        out.append(tok.text)
        pos = tok.end
    return "".join(out)


def split_sentences(tokens: Sequence, abbreviations: Iterable[str] = ABBREVIATIONS) -> list[int]:
    """Exclusive end index of every sentence in ``tokens``.

    A sentence ends after a run of ``. ! ?`` tokens, except a ``.`` directly
    after an abbreviation. Leftover tokens form a final sentence.
    """
    abbrev = {a.lower() for a in abbreviations}
    words = [t.text if isinstance(t, Token) else str(t) for t in tokens]
    ends: list[int] = []
    n = len(words)
    k = 0
    while k < n:
        w = words[k]
        if w in TERMINATORS and not (w == "." and k > 0 and words[k - 1].lower() in abbrev):
            while k + 1 < n and words[k + 1] in TERMINATORS:
                k += 1
            ends.append(k + 1)
        k += 1
    if n and (not ends or ends[-1] != n):
        ends.append(n)
    return ends


@dataclass
class Passage:
    """A passage as sentences of words, with a flat word view."""

    sentences: list[list[str]]
    offsets: Optional[list[tuple[int, int]]] = None
    text: Optional[str] = None
    flat_tokens: list[str] = field(init=False)
    sent_of_word: list[tuple[int, int]] = field(init=False)
    sentence_spans: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        if not self.sentences:
            raise ContractError("a passage needs at least one sentence")
        if any(len(s) == 0 for s in self.sentences):
            raise ContractError("empty sentence in passage")
        self.flat_tokens = [w for s in self.sentences for w in s]
        self.sent_of_word = [(i, j) for i, s in enumerate(self.sentences) for j in range(len(s))]
        spans, start = [], 0
        for s in self.sentences:
            spans.append((start, start + len(s)))
            start += len(s)
        self.sentence_spans = spans
        if self.offsets is not None and len(self.offsets) != len(self.flat_tokens):
            raise ContractError("offsets do not align with tokens")

    @classmethod
    def from_tokens(cls, tokens: Sequence[Token], text: Optional[str] = None) -> "Passage":
        ends = split_sentences(tokens)
        sentences, start = [], 0
        for end in ends:
            sentences.append([t.text for t in tokens[start:end]])
            start = end
        return cls(sentences, offsets=[(t.start, t.end) for t in tokens], text=text)

    @classmethod
    def from_text(cls, text: str) -> "Passage":
        return cls.from_tokens(tokenize(text), text=text)

    @property
    def n_sentences(self) -> int:
        return len(self.sentences)

    def __len__(self) -> int:
        return len(self.flat_tokens)

    def flat_index(self, i: int, j: int) -> int:
        return self.sentence_spans[i][0] + j

    @property
    def sentence_index(self) -> np.ndarray:
        return np.fromiter((i for i, _ in self.sent_of_word), dtype=np.int64, count=len(self.flat_tokens))


@dataclass
class Question:
    tokens: list[str]

    def __post_init__(self):
        if not self.tokens:
            raise ContractError("a question needs at least one token")

    @classmethod
    def from_text(cls, text: str) -> "Question":
        return cls([t.text for t in tokenize(text)])

    def __len__(self) -> int:
        return len(self.tokens)


class Vocabulary:
    """Token ids ordered by first occurrence after three reserved ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK, PLACEHOLDER]
        self.stoi: dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID, PLACEHOLDER: PLACEHOLDER_ID}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, sequences: Iterable[Iterable[str]]) -> "Vocabulary":
        vocab = cls()
        for seq in sequences:
            for tok in seq:
                vocab.add(tok)
        return vocab

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()
