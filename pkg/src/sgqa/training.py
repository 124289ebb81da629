"""ADAMAX optimisation, the epoch loop, evaluation and text checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                     ConfigurationError, ContractError, NumericError)
from .metrics import MetricReport, accuracy, bucket_by_sentence_length, exact_match, f1_score
from .models import ClozeModel, ClozeModelConfig, SpanModel, SpanModelConfig
from .module import Module
from .tensor import RngState, Tape, backward
from .text import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "SGQA-CKPT"


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamaxState:
    """Per-parameter first moments ``m`` and infinity-norm accumulators ``u``."""

    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 0.002
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)

    def slot(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.u[name] = np.zeros(shape)
        return self.m[name], self.u[name]


def adamax_step(state: AdamaxState, named_params: Sequence, grads: Optional[Sequence[np.ndarray]] = None,
                lr_t: Optional[float] = None, batch_id=None) -> None:
    """One in-place ADAMAX update of every ``(name, tensor)`` in ``named_params``.

    ``grads`` defaults to each tensor's accumulated ``grad``. All gradients are
    checked before any parameter moves, so a non-finite gradient leaves the
    model and the optimiser untouched.

    ``eps`` only replaces a zero accumulator. A zero ``u`` means every
    gradient so far was zero, hence ``m`` is zero too and the step is 0/eps =
    0. Elsewhere the division is by ``u`` itself, so the first step of any
    nonzero gradient has magnitude exactly ``lr``.
    """
    named_params = list(named_params)
    if grads is None:
        grads = [p.grad for _, p in named_params]
    if len(grads) != len(named_params):
        raise ContractError(f"adamax_step: {len(grads)} gradients for {len(named_params)} parameters")
    for (name, p), g in zip(named_params, grads):
        if np.shape(g) != p.shape:
            raise ContractError(f"adamax_step: gradient of {name} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name} in batch {batch_id}")
    lr_t = state.lr if lr_t is None else lr_t
    state.t += 1
    scale = lr_t / (1.0 - state.beta1 ** state.t)
    for (name, p), g in zip(named_params, grads):
        m, u = state.slot(name, p.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data -= scale * m / np.where(u > 0.0, u, state.eps)


def lr_schedule(base_lr: float, epoch: int, decay: float = 0.9) -> float:
    """``base_lr * decay**epoch``, evaluated in decimal and rounded once."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return float(Decimal(repr(float(base_lr))) * Decimal(repr(float(decay))) ** int(epoch))


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients to a global L2 norm of at most ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params)))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.002
    lr_decay: float = 0.9
    dropout: Optional[float] = None
    epochs: int = 30
    seed: int = 7
    clip_norm: Optional[float] = None
    trace_gates: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")


@dataclass
class EpochReport:
    epoch: int
    lr: float
    mean_loss: float
    train_metric: float
    n_examples: int


def batches(n: int, batch_size: int, rng: RngState) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def example_loss(model, example, rng: RngState, trace: bool = False):
    """Forward in training mode and backpropagate; returns the output."""
    with Tape() as tape:
        out = model.forward(example, training=True, rng=rng, trace=trace)
    loss = float(out.loss.data)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss on example {example.id}")
    backward(tape, out.loss)
    return out


def _correct(model, example, out) -> float:
    if isinstance(model, SpanModel):
        return float(out.start == example.answer_start and out.end == example.answer_end)
    return float(out.prediction == example.answer_index)


def train_epoch(model: Module, dataset: Sequence, config: TrainConfig, rng: RngState,
                state: AdamaxState, epoch: int) -> EpochReport:
    """One shuffled pass over ``dataset`` with one ADAMAX step per batch.

    The batch loss is the mean of the per-example losses. ``train_metric`` is
    the fraction of examples predicted correctly by the training-mode forward
    pass (exact span or exact candidate).
    """
    if len(dataset) == 0:
        raise ContractError("train_epoch needs a nonempty dataset")
    lr_t = lr_schedule(config.lr, epoch, config.lr_decay)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    total, hits = 0.0, 0.0
    for b, idx in enumerate(batches(len(dataset), config.batch_size, rng)):
        model.zero_grad()
        for k in idx:
            ex = dataset[int(k)]
            out = example_loss(model, ex, rng)
            total += float(out.loss.data)
            hits += _correct(model, ex, out)
        for p in params:
            p.grad /= len(idx)
        if config.clip_norm is not None:
            clip_gradients(params, config.clip_norm)
        adamax_step(state, named, lr_t=lr_t, batch_id=f"{epoch}:{b}")
    return EpochReport(epoch, lr_t, total / len(dataset), hits / len(dataset), len(dataset))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricReport
    predictions: list
    scores: dict[str, list[float]]


def evaluate(model: Module, dataset: Sequence, n_buckets: Optional[int] = None) -> Evaluation:
    """Deterministic (dropout-free) predictions and metrics over ``dataset``."""
    if len(dataset) == 0:
        raise ContractError("evaluate needs a nonempty dataset")
    if isinstance(model, SpanModel):
        preds, em, f1 = [], [], []
        for ex in dataset:
            out = model.forward(ex)
            text = ex.span_text(out.start, out.end)
            preds.append((out.start, out.end, text))
            em.append(float(exact_match(text, ex.golds)))
            f1.append(f1_score(text, ex.golds))
        scores = {"em": em, "f1": f1}
        report = MetricReport(len(dataset), em=float(np.mean(em)), f1=float(np.mean(f1)))
    else:
        preds = [model.forward(ex).prediction for ex in dataset]
        hits = [float(p == ex.answer_index) for p, ex in zip(preds, dataset)]
        scores = {"accuracy": hits}
        report = MetricReport(len(dataset), accuracy=accuracy(preds, [ex.answer_index for ex in dataset]))
    if n_buckets:
        _, report.buckets = bucket_by_sentence_length(dataset, scores, n_buckets)
    return Evaluation(report, preds, scores)


def headline(model: Module, report: MetricReport) -> float:
    return report.em if isinstance(model, SpanModel) else report.accuracy


# ---------------------------------------------------------------------------
# fit with resumable state
# ---------------------------------------------------------------------------


@dataclass
class TrainingRun:
    """Everything needed to continue training bit-exactly."""

    model: Module
    config: TrainConfig
    optimizer: AdamaxState
    rng: RngState
    epoch: int = 0
    history: list[EpochReport] = field(default_factory=list)


def start_run(model: Module, config: TrainConfig) -> TrainingRun:
    config.validate()
    if config.dropout is not None:
        model.config.dropout = config.dropout
    return TrainingRun(model, config, AdamaxState(lr=config.lr), RngState(config.seed))


def fit(run: TrainingRun, dataset: Sequence, epochs: Optional[int] = None,
        on_epoch: Optional[Callable[[TrainingRun, EpochReport], None]] = None) -> TrainingRun:
    """Train until ``run.epoch`` reaches ``epochs`` (default: the config's)."""
    target = run.config.epochs if epochs is None else epochs
    while run.epoch < target:
        report = train_epoch(run.model, dataset, run.config, run.rng, run.optimizer, run.epoch)
        run.epoch += 1
        run.history.append(report)
        log.info("epoch %d lr %.6g loss %.6f train %.4f", report.epoch, report.lr, report.mean_loss,
                 report.train_metric)
        if on_epoch is not None:
            on_epoch(run, report)
    return run


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _array_lines(tag: str, name: str, a: np.ndarray) -> list[str]:
    shape = ",".join(str(s) for s in a.shape)
    return [f"{tag} {name} {shape}", " ".join(_num(x) for x in a.reshape(-1))]


@dataclass
class Checkpoint:
    task: str
    model_config: dict
    train_config: dict
    vocab: list[str]
    epoch: int
    rng_state: dict
    optimizer: AdamaxState
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(_json({"model": self.model_config, "train": self.train_config}).encode()).hexdigest()


def checkpoint_of(run: TrainingRun) -> Checkpoint:
    model = run.model
    return Checkpoint(
        task=model.task, model_config=asdict(model.config), train_config=asdict(run.config),
        vocab=list(model.vocab.itos), epoch=run.epoch, rng_state=run.rng.get_state(), optimizer=run.optimizer,
        params={n: p.data for n, p in model.named_parameters()},
        buffers={n: b.data for n, b in model.named_buffers()})


def dumps_checkpoint(ck: Checkpoint) -> str:
    opt = ck.optimizer
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"task {ck.task}",
             f"config-digest {ck.config_digest}",
             f"model-config {_json(ck.model_config)}",
             f"train-config {_json(ck.train_config)}",
             f"vocab-hash {Vocabulary(ck.vocab[3:]).digest()}",
             f"vocab {len(ck.vocab)}"]
    lines += [json.dumps(tok) for tok in ck.vocab]
    lines += [f"epoch {ck.epoch}",
              f"rng {_json(ck.rng_state)}",
              f"adamax {opt.t} {_num(opt.beta1)} {_num(opt.beta2)} {_num(opt.lr)} {_num(opt.eps)}",
              f"params {len(ck.params)}"]
    for name, a in ck.params.items():
        lines += _array_lines("param", name, a)
        if name in opt.m:
            lines += _array_lines("m", name, opt.m[name])
            lines += _array_lines("u", name, opt.u[name])
    lines.append(f"buffers {len(ck.buffers)}")
    for name, a in ck.buffers.items():
        lines += _array_lines("buffer", name, a)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(run_or_ck, path) -> Path:
    ck = run_or_ck if isinstance(run_or_ck, Checkpoint) else checkpoint_of(run_or_ck)
    path = Path(path)
    path.write_text(dumps_checkpoint(ck), encoding="utf-8")
    return path


class _Reader:
    def __init__(self, text: str, source: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.source = source

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointTruncatedError(f"{self.source}: checkpoint ends unexpectedly at line {self.pos + 1}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def field(self, key: str) -> str:
        line = self.next()
        head, _, rest = line.partition(" ")
        if head != key:
            raise CheckpointError(f"{self.source}:{self.pos}: expected '{key}', found {line[:40]!r}")
        return rest

    def peek(self) -> str:
        return self.lines[self.pos] if self.pos < len(self.lines) else ""

    def array(self, tag: str) -> tuple[str, np.ndarray]:
        name, _, shape_s = self.field(tag).partition(" ")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        values = self.next().split()
        size = int(np.prod(shape)) if shape else 1
        if len(values) != size:
            raise CheckpointTruncatedError(
                f"{self.source}:{self.pos}: {name} has {len(values)} values, expected {size}")
        return name, np.array([float(v) for v in values], dtype=np.float64).reshape(shape)


def loads_checkpoint(text: str, source: str = "<checkpoint>") -> Checkpoint:
    r = _Reader(text, source)
    header = r.next().split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if header[1] != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(f"{source}: checkpoint version {header[1]}, this reader understands "
                                     f"{CHECKPOINT_VERSION}")
    task = r.field("task")
    digest = r.field("config-digest")
    model_config = json.loads(r.field("model-config"))
    train_config = json.loads(r.field("train-config"))
    vocab_hash = r.field("vocab-hash")
    vocab = [json.loads(r.next()) for _ in range(int(r.field("vocab")))]
    if Vocabulary(vocab[3:]).digest() != vocab_hash:
        raise CheckpointError(f"{source}: vocabulary hash mismatch")
    epoch = int(r.field("epoch"))
    rng_state = json.loads(r.field("rng"))
    t, b1, b2, lr, eps = r.field("adamax").split()
    opt = AdamaxState(beta1=float(b1), beta2=float(b2), lr=float(lr), eps=float(eps), t=int(t))
    params = {}
    for _ in range(int(r.field("params"))):
        name, a = r.array("param")
        params[name] = a
        if r.peek().startswith("m "):
            opt.m[name] = r.array("m")[1]
            opt.u[name] = r.array("u")[1]
    buffers = {}
    for _ in range(int(r.field("buffers"))):
        name, a = r.array("buffer")
        buffers[name] = a
    r.field("end")
    ck = Checkpoint(task, model_config, train_config, vocab, epoch, rng_state, opt, params, buffers)
    if ck.config_digest != digest:
        raise CheckpointError(f"{source}: config digest mismatch")
    return ck


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return loads_checkpoint(path.read_text(encoding="utf-8"), str(path))


def model_config_from_dict(task: str, d: dict):
    cls = {"span": SpanModelConfig, "cloze": ClozeModelConfig}.get(task)
    if cls is None:
        raise CheckpointError(f"unknown task {task!r}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise CheckpointError(f"model config does not match a {task} model: {exc}") from exc


def apply_checkpoint(model: Module, ck: Checkpoint) -> None:
    """Copy checkpoint values into ``model``; names and shapes must agree."""
    for kind, table, current in (("parameter", ck.params, dict(model.named_parameters())),
                                 ("buffer", ck.buffers, dict(model.named_buffers()))):
        if set(table) != set(current):
            missing = sorted(set(current) - set(table)) + sorted(set(table) - set(current))
            raise CheckpointShapeError(f"{kind} names differ from the current model: {missing[:5]}")
        for name, t in current.items():
            if table[name].shape != t.shape:
                raise CheckpointShapeError(
                    f"{kind} {name}: checkpoint shape {table[name].shape}, model expects {t.shape}")
    for name, t in model.named_parameters():
        t.data[...] = ck.params[name]
    for name, t in model.named_buffers():
        t.data[...] = ck.buffers[name]


def restore_model(ck: Checkpoint) -> Module:
    config = model_config_from_dict(ck.task, ck.model_config)
    vocab = Vocabulary(ck.vocab[3:])
    zeros = np.zeros((len(vocab), config.embed_dim))
    model = (SpanModel if ck.task == "span" else ClozeModel)(config, vocab, zeros)
    apply_checkpoint(model, ck)
    return model


def restore_run(ck: Checkpoint) -> TrainingRun:
    """Rebuild model, optimiser and random stream so training resumes exactly."""
    model = restore_model(ck)
    try:
        config = TrainConfig(**ck.train_config)
    except TypeError as exc:
        raise CheckpointError(f"train config is not recognised: {exc}") from exc
    rng = RngState(config.seed)
    rng.set_state(ck.rng_state)
    opt = AdamaxState(ck.optimizer.beta1, ck.optimizer.beta2, ck.optimizer.lr, ck.optimizer.eps, ck.optimizer.t,
                      {k: v.copy() for k, v in ck.optimizer.m.items()},
                      {k: v.copy() for k, v in ck.optimizer.u.items()})
    return TrainingRun(model, config, opt, rng, ck.epoch)
