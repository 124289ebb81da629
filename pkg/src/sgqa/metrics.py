"""Exact match, token F1, cloze accuracy and sentence-length buckets."""

from __future__ import annotations

import csv
import io
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def _strip(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch not in _PUNCT)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, drop punctuation and articles, split on whitespace."""
    return _ARTICLES.sub(" ", _strip(text)).split()


def overlap_tokens(text: str) -> list[str]:
    """Tokens scored by F1: lowercased and punctuation-free, articles kept."""
    return _strip(text).split()


def exact_match(pred: str, golds: Sequence[str]) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_toks: list[str], gold_toks: list[str]) -> float:
    if not pred_toks and not gold_toks:
        return 1.0
    common = Counter(pred_toks) & Counter(gold_toks)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def f1_score(pred: str, golds: Sequence[str]) -> float:
    """Best token-overlap F1 over the golds.

    A gold that the prediction matches exactly (after normalization) scores
    1. Otherwise precision and recall count overlapping tokens with articles
    kept, so ``"cat sat"`` against ``"the cat"`` scores 0.5.
    """
    p = normalize_answer(pred)
    p_tokens = overlap_tokens(pred)
    return max(1.0 if p == normalize_answer(g) else _f1(p_tokens, overlap_tokens(g)) for g in golds)


def accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold lengths differ")
    if not gold:
        return 0.0
    return sum(int(p == g) for p, g in zip(predicted, gold)) / len(gold)


def assign_buckets(values: Sequence[float], n_buckets: int = 5) -> list[int]:
    """Equal-population buckets over ``values`` in ascending order.

    Bucket sizes differ by at most one, the larger ones first. Ties keep
    input order.
    """
    n = len(values)
    if n == 0:
        raise ValueError("cannot bucket an empty dataset")
    if n < n_buckets:
        warnings.warn(f"{n} items is fewer than {n_buckets} buckets; using a single bucket")
        return [0] * n
    order = sorted(range(n), key=lambda k: values[k])
    base, extra = divmod(n, n_buckets)
    out = [0] * n
    pos = 0
    for b in range(n_buckets):
        size = base + (1 if b < extra else 0)
        for k in order[pos:pos + size]:
            out[k] = b
        pos += size
    return out


def average_sentence_length(passage) -> float:
    return len(passage.flat_tokens) / passage.n_sentences


@dataclass
class MetricReport:
    n_examples: int
    em: Optional[float] = None
    f1: Optional[float] = None
    accuracy: Optional[float] = None
    buckets: list[dict] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float, int]]:
        rows = []
        for name in ("em", "f1", "accuracy"):
            value = getattr(self, name)
            if value is not None:
                rows.append((name, "all", value, self.n_examples))
        for b in self.buckets:
            for name in ("em", "f1", "accuracy"):
                if b.get(name) is not None:
                    rows.append((name, str(b["bucket"]), b[name], b["n"]))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "bucket", "value", "n"])
        for metric, bucket, value, n in self.rows():
            w.writerow([metric, bucket, repr(float(value)), n])
        return buf.getvalue()


def _mean(xs):
    return sum(xs) / len(xs) if xs else 0.0


def bucket_by_sentence_length(examples, scores: dict[str, Sequence[float]], n_buckets: int = 5):
    """Assign examples to average-sentence-length buckets and score each bucket.

    ``scores`` maps a metric name (``em``, ``f1`` or ``accuracy``) to one
    per-example value. Returns the bucket id of every example and a list of
    per-bucket summaries.
    """
    lengths = [average_sentence_length(ex.passage) for ex in examples]
    assignment = assign_buckets(lengths, n_buckets)
    summaries = []
    for b in range(max(assignment) + 1):
        members = [k for k, a in enumerate(assignment) if a == b]
        entry = {"bucket": b, "n": len(members),
                 "min_len": min(lengths[k] for k in members), "max_len": max(lengths[k] for k in members)}
        for name, vals in scores.items():
            entry[name] = _mean([vals[k] for k in members])
        summaries.append(entry)
    return assignment, summaries
