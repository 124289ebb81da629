"""Gate-trace analysis: per-word heatmaps, global token ranking, per-hop distributions.

Every aggregate is an exact recomputation from the traced gate values, and
all quantiles use the nearest-rank definition.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError
from .models import GateTrace

N_LEVELS = 5


@dataclass(frozen=True)
class GateRecord:
    example_id: str
    hop: int
    token: str
    position: int
    value: float


def trace_to_records(trace: GateTrace, passage, example_id: str = "") -> list[GateRecord]:
    """One record per (hop, word) holding the gate averaged over dimensions."""
    M = len(passage.flat_tokens)
    records = []
    for k, F in enumerate(trace.hops):
        F = np.asarray(F)
        if F.ndim != 2 or F.shape[0] != M:
            raise ContractError(f"gate trace of shape {F.shape} at hop {k + 1} does not align with {M} words")
        means = F.mean(axis=1)
        records.extend(GateRecord(example_id, k + 1, tok, j, float(means[j]))
                       for j, tok in enumerate(passage.flat_tokens))
    return records


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    """Smallest value with at least a fraction ``q`` of the data at or below it."""
    n = len(sorted_values)
    if n == 0:
        raise ContractError("quantile of an empty sample")
    rank = max(1, math.ceil(q * n))
    return sorted_values[rank - 1]


def quantize_levels(values: Sequence[float], n_levels: int = N_LEVELS) -> list[int]:
    """Intensity level 1..n_levels from the within-sample nearest-rank quantiles.

    A value gets level ``1 + #{cut points strictly below it}``, with the cut
    points at quantiles 1/n, 2/n, ... When all values are equal every word
    sits at the middle level.
    """
    values = [float(v) for v in values]
    if not values:
        return []
    if min(values) == max(values):
        return [(n_levels + 1) // 2] * len(values)
    ordered = sorted(values)
    cuts = [nearest_rank(ordered, k / n_levels) for k in range(1, n_levels)]
    return [1 + sum(v > c for c in cuts) for v in values]


def _select(records: Iterable[GateRecord], example_id: Optional[str], hop: int) -> list[GateRecord]:
    chosen = [r for r in records if r.hop == hop and (example_id is None or r.example_id == example_id)]
    ids = {r.example_id for r in chosen}
    if len(ids) > 1:
        raise ContractError(f"heatmap needs records of one example, got {len(ids)}")
    return sorted(chosen, key=lambda r: r.position)


def render_heatmap_text(records: Iterable[GateRecord], passage, hop: int = 1,
                        example_id: Optional[str] = None) -> tuple[list[str], str]:
    """Text heatmap (one line per sentence, ``token[level]``) and its CSV.

    The CSV columns are token, value, hop, example_id.
    """
    chosen = _select(records, example_id, hop)
    if len(chosen) != len(passage.flat_tokens):
        raise ContractError(f"{len(chosen)} records for a passage of {len(passage.flat_tokens)} words")
    levels = quantize_levels([r.value for r in chosen])
    lines = []
    for start, stop in passage.sentence_spans:
        lines.append(" ".join(f"{chosen[j].token}[{levels[j]}]" for j in range(start, stop)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token", "value", "hop", "example_id"])
    for r in chosen:
        w.writerow([r.token, repr(r.value), r.hop, r.example_id])
    return lines, buf.getvalue()


@dataclass(frozen=True)
class TokenStat:
    token: str
    mean: float
    count: int


def token_means(records: Iterable[GateRecord], min_count: int = 5) -> list[TokenStat]:
    sums: dict[str, float] = defaultdict(float)
    counts: dict[str, int] = defaultdict(int)
    for r in records:
        sums[r.token] += r.value
        counts[r.token] += 1
    return [TokenStat(tok, sums[tok] / counts[tok], counts[tok]) for tok in sums if counts[tok] >= min_count]


def rank_tokens_global(records: Sequence[GateRecord], min_count: int = 5,
                       k: int = 10) -> tuple[list[TokenStat], list[TokenStat]]:
    """(highest k, lowest k) token types by mean gate value.

    Ties are broken by token text so the ranking is deterministic.
    """
    records = list(records)
    if not records:
        raise ContractError("cannot rank tokens of an empty corpus")
    stats = token_means(records, min_count)
    highest = sorted(stats, key=lambda s: (-s.mean, s.token))[:k]
    lowest = sorted(stats, key=lambda s: (s.mean, s.token))[:k]
    return highest, lowest


def ranking_csv(highest: Sequence[TokenStat], lowest: Sequence[TokenStat]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token", "mean", "count", "list"])
    for name, rows in (("highest", highest), ("lowest", lowest)):
        for s in rows:
            w.writerow([s.token, repr(s.mean), s.count, name])
    return buf.getvalue()


HOP_STAT_FIELDS = ("min", "q1", "median", "q3", "max", "mean")


def passage_means(records: Iterable[GateRecord]) -> dict[int, dict[str, float]]:
    """Per hop, each example's gate value averaged over its words."""
    sums: dict[tuple[int, str], float] = defaultdict(float)
    counts: dict[tuple[int, str], int] = defaultdict(int)
    for r in records:
        sums[r.hop, r.example_id] += r.value
        counts[r.hop, r.example_id] += 1
    out: dict[int, dict[str, float]] = defaultdict(dict)
    for (hop, ex), s in sums.items():
        out[hop][ex] = s / counts[hop, ex]
    return dict(out)


def hop_distribution_stats(records: Iterable[GateRecord]) -> dict[int, dict[str, float]]:
    """Box-plot statistics over passages for every hop."""
    stats = {}
    for hop, per_example in sorted(passage_means(records).items()):
        vals = sorted(per_example.values())
        stats[hop] = {"min": vals[0], "q1": nearest_rank(vals, 0.25), "median": nearest_rank(vals, 0.5),
                      "q3": nearest_rank(vals, 0.75), "max": vals[-1], "mean": math.fsum(vals) / len(vals)}
    return stats


def hop_stats_csv(stats: dict[int, dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("hop",) + HOP_STAT_FIELDS)
    for hop, s in sorted(stats.items()):
        w.writerow([hop] + [repr(s[f]) for f in HOP_STAT_FIELDS])
    return buf.getvalue()


def trace_dataset(model, dataset) -> list[GateRecord]:
    """Dropout-free traced forward passes over ``dataset``."""
    records = []
    for ex in dataset:
        out = model.forward(ex, trace=True)
        if out.trace is None:
            raise ContractError("model has no sentence gate to trace (concatenation combiner)")
        records.extend(trace_to_records(out.trace, ex.passage, ex.id))
    return records
