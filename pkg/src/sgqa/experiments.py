"""Desk-scale experiment presets and the ablation sweep harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .data import SyntheticClozeConfig, SyntheticSpanConfig, gen_synthetic_cloze, gen_synthetic_span
from .embeddings import EmbeddingMatrix
from .errors import ConfigurationError
from .gradcheck import grad_check_groups
from .models import ClozeModel, ClozeModelConfig, SpanModel, SpanModelConfig
from .text import Vocabulary
from .training import TrainConfig, TrainingRun, evaluate, fit, start_run

HELDOUT_SEED_OFFSET = 1000

# Learning rate for the small synthetic runs. With 200 examples and batch 8
# there are only 25 updates per epoch, far fewer than at corpus scale.
DESK_LR = 0.02


def desk_train_config(seed: int = 7, epochs: int = 30, **overrides) -> TrainConfig:
    return replace(TrainConfig(batch_size=8, lr=DESK_LR, epochs=epochs, seed=seed), **overrides)


def build_vocab(*datasets) -> Vocabulary:
    return Vocabulary.build(ex.passage.flat_tokens + ex.question.tokens for ds in datasets for ex in ds)


@dataclass
class TaskData:
    train: list
    heldout: list
    vocab: Vocabulary


def span_task_data(seed: int = 7, n_train: int = 200, n_heldout: int = 50, vocab_size: int = 100) -> TaskData:
    train = gen_synthetic_span(SyntheticSpanConfig(n_examples=n_train, vocab_size=vocab_size, seed=seed))
    heldout = gen_synthetic_span(SyntheticSpanConfig(n_examples=n_heldout, vocab_size=vocab_size,
                                                     seed=seed + HELDOUT_SEED_OFFSET))
    return TaskData(train, heldout, build_vocab(train, heldout))


def cloze_task_data(seed: int = 7, n_train: int = 300, n_heldout: int = 100, n_candidates: int = 4) -> TaskData:
    train = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=n_train, n_candidates=n_candidates, seed=seed))
    heldout = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=n_heldout, n_candidates=n_candidates,
                                                       seed=seed + HELDOUT_SEED_OFFSET))
    return TaskData(train, heldout, build_vocab(train, heldout))


def make_model(task: str, config, vocab: Vocabulary, embeddings: Optional[EmbeddingMatrix] = None):
    if embeddings is None:
        embeddings = EmbeddingMatrix.random(vocab, config.embed_dim, config.seed)
    cls = {"span": SpanModel, "cloze": ClozeModel}.get(task)
    if cls is None:
        raise ConfigurationError(f"unknown task {task!r}")
    return cls(config, vocab, embeddings.matrix)


@dataclass
class RunResult:
    run: TrainingRun
    train_metrics: dict
    heldout_metrics: dict


def _metrics(model, dataset) -> dict:
    r = evaluate(model, dataset).report
    return {k: v for k, v in (("em", r.em), ("f1", r.f1), ("accuracy", r.accuracy)) if v is not None}


def train_and_score(task: str, model_config, data: TaskData, train_config: TrainConfig) -> RunResult:
    model = make_model(task, model_config, data.vocab)
    run = fit(start_run(model, train_config), data.train)
    return RunResult(run, _metrics(model, data.train), _metrics(model, data.heldout))


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

SWEEPS = {
    "encoders": [
        ("BiGRU-last", {"encoder_kind": "last"}),
        ("Max pooling", {"encoder_kind": "max"}),
        ("Inner attention", {"encoder_kind": "attention"}),
        ("Average pooling", {"encoder_kind": "average"}),
    ],
    "combiners": [
        ("Concatenation", {"combiner_kind": "concat", "use_matching": False}),
        ("Scalar gate", {"combiner_kind": "scalar", "use_matching": False}),
        ("Vector gate", {"combiner_kind": "vector", "use_matching": False}),
        ("Concatenation + Matching", {"combiner_kind": "concat", "use_matching": True}),
        ("Scalar gate + Matching", {"combiner_kind": "scalar", "use_matching": True}),
        ("Vector gate + Matching", {"combiner_kind": "vector", "use_matching": True}),
    ],
}

SWEEP_COLUMNS = ("row", "encoder", "combiner", "matching", "train_em", "train_f1", "heldout_em", "heldout_f1")


def run_sweep(name: str, data: TaskData, base: SpanModelConfig, train_config: TrainConfig,
              rows: Optional[Sequence[str]] = None) -> list[dict]:
    """Train one span model per table row; returns one result dict per row."""
    if name not in SWEEPS:
        raise ConfigurationError(f"unknown sweep {name!r}; choose from {sorted(SWEEPS)}")
    out = []
    for label, overrides in SWEEPS[name]:
        if rows is not None and label not in rows:
            continue
        config = replace(base, **overrides)
        res = train_and_score("span", config, data, train_config)
        out.append({"row": label, "encoder": config.encoder_kind, "combiner": config.combiner_kind,
                    "matching": config.use_matching, "train_em": res.train_metrics["em"],
                    "train_f1": res.train_metrics["f1"], "heldout_em": res.heldout_metrics["em"],
                    "heldout_f1": res.heldout_metrics["f1"]})
    return out


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r["row"], r["encoder"], r["combiner"], str(r["matching"]).lower()]
                   + [repr(float(r[k])) for k in SWEEP_COLUMNS[4:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# finite-difference suite on tiny models
# ---------------------------------------------------------------------------


@dataclass
class GradCase:
    name: str
    model: object
    example: object

    def loss(self):
        return self.model.forward(self.example).loss


def tiny_span_case(seed: int = 0, hidden_dim: int = 8, **overrides) -> GradCase:
    """Span model with d=8 on a two-sentence passage."""
    ex = gen_synthetic_span(SyntheticSpanConfig(n_examples=1, vocab_size=20, n_markers=3, n_sentences=2,
                                                sent_len_range=(4, 5), max_answer_len=2, seed=seed))[0]
    vocab = build_vocab([ex])
    config = SpanModelConfig(hidden_dim=hidden_dim, embed_dim=6, seed=seed, **overrides)
    return GradCase("span", make_model("span", config, vocab), ex)


def tiny_cloze_case(seed: int = 0, hidden_dim: int = 8, n_hops: int = 2, **overrides) -> GradCase:
    """Cloze model with d=8 and K=2 on a short passage."""
    ex = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=1, n_candidates=3, n_entities=4, n_relations=4,
                                                  n_filler_words=6, n_filler_sentences=0,
                                                  sent_len_range=(3, 4), seed=seed))[0]
    vocab = build_vocab([ex])
    config = ClozeModelConfig(hidden_dim=hidden_dim, embed_dim=6, n_hops=n_hops, seed=seed, **overrides)
    return GradCase("cloze", make_model("cloze", config, vocab), ex)


# Five-point stencil with a 1e-4 step: truncation error is negligible and
# rounding noise stays near 1e-11. A step much wider starts crossing the kink
# of |h - q| in the matching vector. Coordinates whose derivative is below
# GRAD_FLOOR are held to an absolute agreement of threshold * GRAD_FLOOR.
GRAD_EPS = 1e-4
GRAD_ORDER = 4
GRAD_FLOOR = 1e-6
GRAD_THRESHOLD = 1e-4


def model_gradient_report(case: GradCase, eps: float = GRAD_EPS, order: int = GRAD_ORDER,
                          floor: float = GRAD_FLOOR, max_coords: Optional[int] = None) -> dict[str, float]:
    """Per-parameter max relative error of the tape gradient of the example loss."""
    return grad_check_groups(case.loss, case.model.param_dict(), eps=eps, max_coords=max_coords,
                             order=order, floor=floor)
