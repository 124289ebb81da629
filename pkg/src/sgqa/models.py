"""Span-extraction and cloze QA models built on sentence-gated word vectors.

Span model::

    embeddings -> BiGRU_Q -> question states Hq, pooled hq
               -> SentenceGatingNetwork(hq) -> gated words U
    U, Hq -> bidirectional match-attention GRU -> projection -> Hr
    Hr -> two-step answer pointer -> start / end distributions

Cloze model, hop k = 1..K::

    X(0) = passage embeddings
    U(k) = SentenceGatingNetwork_k(X(k-1), question_k)
    X(k) = gated attention of U(k) over question states
    attention sum over candidate positions of X(K)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import ClozeExample, SpanExample
from . import kernels
from .encoders import (BiGruLayer, GruCell, SentenceEncoderKind, bigru_forward, encode_question,
                       gru_step, split_gru_grads, stack_gru)
from .errors import ConfigurationError, ContractError, DimensionError
from .gate import CombinerKind, MatchingConfig, SentenceGatingNetwork
from .module import Module
from .tensor import RngState, Tensor, make_op
from .text import Vocabulary


@dataclass
class GateTrace:
    """Gate activations f recorded during one forward pass, one M x 2d array per hop."""

    hops: list[np.ndarray] = field(default_factory=list)

    @property
    def n_hops(self) -> int:
        return len(self.hops)

    def word_means(self) -> list[np.ndarray]:
        return [h.mean(axis=1) for h in self.hops]

    def as_array(self) -> np.ndarray:
        return np.stack(self.hops)


# ---------------------------------------------------------------------------
# match-attention layer
# ---------------------------------------------------------------------------


def match_attention_direction(U: Tensor, Hq: Tensor, W_p: Tensor, W_r: Tensor, b_a: Tensor,
                              cell: GruCell, reverse: bool = False,
                              attention_out: Optional[list] = None) -> Tensor:
    """One direction of the recurrent match-attention pass (fused tape node).

    At step t the question is attended with scores ``Hq @ (W_p u_t + W_r h + b_a)``;
    the attended summary c_t is concatenated to u_t and fed to the GRU cell.
    Attention rows are appended to ``attention_out`` when given.
    """
    M, width = U.shape
    N = Hq.shape[0]
    if Hq.ndim != 2 or Hq.shape[1] != width:
        raise DimensionError(f"match attention: question states {Hq.shape} vs passage {U.shape}")
    if cell.input_dim != 2 * width:
        raise DimensionError("match attention: GRU input must be twice the word width")
    if M == 0 or N == 0:
        raise ContractError("match attention needs a nonempty passage and question")
    params = cell.ordered()
    W, b, Uzr, Uh = stack_gru([p.data for p in params])
    d = cell.hidden_dim
    Ud, Qd, Wp, Wr = U.data, Hq.data, W_p.data, W_r.data
    Wu, Wc = W[:, :width], np.ascontiguousarray(W[:, width:])
    PU = Ud @ Wp.T + b_a.data
    GXU = Ud @ Wu.T + b
    H, A, AV, C, Z, R, HH, HP = kernels.match_forward(PU, GXU, Qd, Wr, Wc, Uzr, Uh, reverse)
    if attention_out is not None:
        attention_out.append(A.copy())

    def backward(G):
        dGX, DA, DS, DC = kernels.match_backward(np.ascontiguousarray(G), Qd, Wr, Wc, Uzr, Uh, reverse,
                                                 A, Z, R, HH, HP)
        dU = dGX @ Wu + DA @ Wp
        dHq = A.T @ DC + DS.T @ AV
        dW = np.concatenate([dGX.T @ Ud, dGX.T @ C], axis=1)
        cell_grads = split_gru_grads(d, dW, dGX.sum(axis=0), dGX[:, :2 * d].T @ HP, dGX[:, 2 * d:].T @ (R * HP))
        return (dU, dHq, DA.T @ Ud, DA.T @ HP, DA.sum(axis=0)) + cell_grads

    return make_op(H, (U, Hq, W_p, W_r, b_a) + params, backward)


class MatchAttentionDirection(Module):
    def __init__(self, width: int, hidden: int, rng: RngState):
        super().__init__()
        bound = 1.0 / np.sqrt(hidden)
        self.W_p = self.uniform_param("W_p", (width, width), bound, rng)
        self.W_r = self.uniform_param("W_r", (width, hidden), bound, rng)
        self.b_a = self.zeros_param("b_a", (width,))
        self.cell = self.add_child("gru", GruCell(2 * width, hidden, rng))

    def __call__(self, U, Hq, reverse=False, attention_out=None):
        return match_attention_direction(U, Hq, self.W_p, self.W_r, self.b_a, self.cell, reverse, attention_out)


class MatchAttentionLayer(Module):
    """Bidirectional match-attention GRU projected back to the word width."""

    def __init__(self, width: int, rng: RngState, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or width
        self.width = width
        self.fwd = self.add_child("fwd", MatchAttentionDirection(width, hidden, rng))
        self.bwd = self.add_child("bwd", MatchAttentionDirection(width, hidden, rng))
        self.W_o = self.uniform_param("W_o", (width, 2 * hidden), 1.0 / np.sqrt(width), rng)
        self.b_o = self.zeros_param("b_o", (width,))

    def __call__(self, U: Tensor, Hq: Tensor, attention_out: Optional[list] = None) -> Tensor:
        return match_attention_layer(U, Hq, self, attention_out)


def match_attention_layer(U: Tensor, Hq: Tensor, layer: MatchAttentionLayer,
                          attention_out: Optional[list] = None) -> Tensor:
    if U.ndim != 2 or U.shape[1] != layer.width:
        raise DimensionError(f"match attention expects rows of width {layer.width}, got {U.shape}")
    Hf = layer.fwd(U, Hq, reverse=False, attention_out=attention_out)
    Hb = layer.bwd(U, Hq, reverse=True, attention_out=attention_out)
    return T.add_bias(T.concat([Hf, Hb], axis=1) @ layer.W_o.T, layer.b_o)


# ---------------------------------------------------------------------------
# answer pointer
# ---------------------------------------------------------------------------


class AnswerPointer(Module):
    """Boundary pointer: start attention, GRU update with its summary, end attention."""

    def __init__(self, width: int, rng: RngState):
        super().__init__()
        bound = 1.0 / np.sqrt(width)
        self.width = width
        self.W_m = self.uniform_param("W_m", (width, width), bound, rng)
        self.W_h = self.uniform_param("W_h", (width, width), bound, rng)
        self.b_p = self.zeros_param("b_p", (width,))
        self.v = self.uniform_param("v", (width,), bound, rng)
        self.cell = self.add_child("gru", GruCell(width, width, rng))

    def logits(self, Hr: Tensor) -> tuple[Tensor, Tensor]:
        if Hr.ndim != 2 or Hr.shape[1] != self.width or Hr.shape[0] == 0:
            raise DimensionError(f"answer pointer expects M x {self.width} states, got {Hr.shape}")
        base = Hr @ self.W_m.T
        h = Tensor(np.zeros(self.width))
        start = T.tanh(T.add_bias(base, self.W_h @ h + self.b_p)) @ self.v
        summary = T.softmax(start) @ Hr
        h = gru_step(self.cell, h, summary)
        end = T.tanh(T.add_bias(base, self.W_h @ h + self.b_p)) @ self.v
        return start, end


def answer_pointer(Hr: Tensor, pointer: AnswerPointer) -> tuple[Tensor, Tensor]:
    start, end = pointer.logits(Hr)
    return T.softmax(start), T.softmax(end)


def decode_span(p_start: np.ndarray, p_end: np.ndarray, max_span_len: int = 15) -> tuple[int, int]:
    """argmax of p_start[i] * p_end[j] over i <= j <= i + max_span_len.

    Ties go to the lowest start, then the lowest end.
    """
    M = len(p_start)
    scores = np.outer(p_start, p_end)
    i, j = np.indices((M, M))
    scores = np.where((j >= i) & (j <= i + max_span_len), scores, -np.inf)
    flat = int(np.argmax(scores))
    return flat // M, flat % M


def decode_span_bruteforce(p_start, p_end, max_span_len: int = 15) -> tuple[int, int]:
    best, best_pair = -np.inf, (0, 0)
    for i in range(len(p_start)):
        for j in range(i, min(len(p_end), i + max_span_len + 1)):
            s = p_start[i] * p_end[j]
            if s > best:
                best, best_pair = s, (i, j)
    return best_pair


# ---------------------------------------------------------------------------
# embeddings with optional character composer
# ---------------------------------------------------------------------------


class CharComposer(Module):
    """Per-token character BiGRU; final states are appended to word embeddings."""

    def __init__(self, vocab: Vocabulary, char_dim: int, hidden_dim: int, rng: RngState):
        super().__init__()
        chars = sorted({ch for tok in vocab.itos for ch in tok})
        self.char_index = {ch: k + 1 for k, ch in enumerate(chars)}
        self.hidden_dim = hidden_dim
        table = rng.uniform(-0.1, 0.1, (len(chars) + 1, char_dim))
        table[0] = 0.0
        self.table = self.add_param("char_embedding", table)
        self.bigru = self.add_child("char_bigru", BiGruLayer(char_dim, hidden_dim, rng))

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def __call__(self, tokens: list[str]) -> Tensor:
        rows = []
        cache = {}
        for tok in tokens:
            if tok not in cache:
                ids = [self.char_index.get(ch, 0) for ch in tok] or [0]
                H = bigru_forward(self.bigru, T.gather(self.table, ids))
                cache[tok] = T.concat([H[len(ids) - 1, :self.hidden_dim], H[0, self.hidden_dim:]])
            rows.append(cache[tok])
        return T.stack(rows)


class Embedder(Module):
    def __init__(self, matrix: np.ndarray, trainable: bool, vocab: Vocabulary,
                 char_dim: int = 0, char_hidden: int = 0, rng: Optional[RngState] = None):
        super().__init__()
        self.vocab = vocab
        if trainable:
            self.table = self.add_param("embedding", matrix)
        else:
            self.table = self.add_buffer("embedding", matrix)
        self.chars = None
        if char_dim:
            self.chars = self.add_child("chars", CharComposer(vocab, char_dim, char_hidden, rng))

    @property
    def output_dim(self) -> int:
        extra = self.chars.output_dim if self.chars is not None else 0
        return self.table.shape[1] + extra

    def __call__(self, tokens: list[str]) -> Tensor:
        E = T.gather(self.table, self.vocab.encode(tokens))
        if self.chars is not None:
            E = T.concat([E, self.chars(tokens)], axis=1)
        return E


# ---------------------------------------------------------------------------
# span model
# ---------------------------------------------------------------------------


@dataclass
class SpanModelConfig:
    hidden_dim: int = 16
    embed_dim: int = 32
    encoder_kind: str = "average"
    combiner_kind: str = "vector"
    use_matching: bool = True
    dropout: float = 0.2
    max_span_len: int = 15
    trainable_embeddings: bool = True
    seed: int = 7

    def validate(self) -> None:
        SentenceEncoderKind(self.encoder_kind)
        CombinerKind(self.combiner_kind)
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ConfigurationError("dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_span_len < 0:
            raise ConfigurationError("max_span_len must be non-negative")


@dataclass
class SpanOutput:
    loss: Tensor
    start: int
    end: int
    start_dist: np.ndarray
    end_dist: np.ndarray
    trace: Optional[GateTrace]
    attention: Optional[list] = None


class SpanModel(Module):
    task = "span"

    def __init__(self, config: SpanModelConfig, vocab: Vocabulary, embeddings: np.ndarray,
                 rng: Optional[RngState] = None):
        super().__init__()
        config.validate()
        if embeddings.shape != (len(vocab), config.embed_dim):
            raise DimensionError(f"embedding matrix {embeddings.shape} vs vocab {len(vocab)} x {config.embed_dim}")
        rng = rng or RngState(config.seed)
        d = config.hidden_dim
        self.config = config
        self.vocab = vocab
        self.embedder = self.add_child("embed", Embedder(embeddings, config.trainable_embeddings, vocab))
        D = self.embedder.output_dim
        self.question_bigru = self.add_child("bigru_q", BiGruLayer(D, d, rng))
        self.gating = self.add_child("sentence_gate", SentenceGatingNetwork(
            D, d, config.encoder_kind, config.combiner_kind, MatchingConfig(config.use_matching), rng))
        self.match = self.add_child("match", MatchAttentionLayer(2 * d, rng))
        self.pointer = self.add_child("pointer", AnswerPointer(2 * d, rng))

    def forward(self, example: SpanExample, training: bool = False, rng: Optional[RngState] = None,
                trace: bool = False, keep_attention: bool = False) -> SpanOutput:
        return span_forward(self, example, training, rng, trace, keep_attention)


def span_forward(model: SpanModel, example: SpanExample, training: bool = False,
                 rng: Optional[RngState] = None, trace: bool = False,
                 keep_attention: bool = False) -> SpanOutput:
    cfg = model.config
    p = cfg.dropout if training else 0.0
    Ep = model.embedder(example.passage.flat_tokens)
    Eq = model.embedder(example.question.tokens)
    Hq, hq = encode_question(model.question_bigru, T.dropout(Eq, p, training, rng))
    E_ps = T.dropout(Ep, p, training, rng)
    E_pw = T.dropout(Ep, p, training, rng)
    U, F = model.gating(example.passage, E_ps, E_pw, hq, p, training, rng)
    U = T.dropout(U, p, training, rng)
    attention = [] if keep_attention else None
    Hr = model.match(U, T.dropout(Hq, p, training, rng), attention)
    start_logits, end_logits = model.pointer.logits(Hr)
    ls = T.log_softmax(start_logits)
    le = T.log_softmax(end_logits)
    loss = -(ls[example.answer_start] + le[example.answer_end])
    ps, pe = np.exp(ls.data), np.exp(le.data)
    start, end = decode_span(ps, pe, cfg.max_span_len)
    gate_trace = GateTrace([F.data.copy()]) if trace and F is not None else None
    return SpanOutput(loss, start, end, ps, pe, gate_trace, attention)


# ---------------------------------------------------------------------------
# cloze model
# ---------------------------------------------------------------------------


@dataclass
class ClozeModelConfig:
    hidden_dim: int = 16
    embed_dim: int = 32
    n_hops: int = 3
    encoder_kind: str = "average"
    combiner_kind: str = "vector"
    use_matching: bool = True
    dropout: float = 0.3
    trainable_embeddings: bool = True
    char_dim: int = 0
    char_hidden: int = 0
    seed: int = 7

    def validate(self) -> None:
        SentenceEncoderKind(self.encoder_kind)
        CombinerKind(self.combiner_kind)
        if self.n_hops < 1:
            raise ConfigurationError("n_hops must be at least 1")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ConfigurationError("dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.char_dim and not self.char_hidden:
            raise ConfigurationError("char_hidden must be set when char_dim is")


@dataclass
class ClozeOutput:
    loss: Tensor
    prediction: int
    probabilities: np.ndarray
    trace: Optional[GateTrace]


class ClozeHop(Module):
    def __init__(self, input_dim: int, embed_dim: int, config: ClozeModelConfig, rng: RngState):
        super().__init__()
        d = config.hidden_dim
        self.question_bigru = self.add_child("bigru_q", BiGruLayer(embed_dim, d, rng))
        self.gating = self.add_child("sentence_gate", SentenceGatingNetwork(
            input_dim, d, config.encoder_kind, config.combiner_kind, MatchingConfig(config.use_matching), rng))


class ClozeModel(Module):
    task = "cloze"

    def __init__(self, config: ClozeModelConfig, vocab: Vocabulary, embeddings: np.ndarray,
                 rng: Optional[RngState] = None):
        super().__init__()
        config.validate()
        if embeddings.shape != (len(vocab), config.embed_dim):
            raise DimensionError(f"embedding matrix {embeddings.shape} vs vocab {len(vocab)} x {config.embed_dim}")
        rng = rng or RngState(config.seed)
        self.config = config
        self.vocab = vocab
        self.embedder = self.add_child("embed", Embedder(
            embeddings, config.trainable_embeddings, vocab, config.char_dim, config.char_hidden, rng))
        D = self.embedder.output_dim
        self.hops = []
        for k in range(config.n_hops):
            in_dim = D if k == 0 else 2 * config.hidden_dim
            self.hops.append(self.add_child(f"hop{k + 1}", ClozeHop(in_dim, D, config, rng)))

    def forward(self, example: ClozeExample, training: bool = False, rng: Optional[RngState] = None,
                trace: bool = False) -> ClozeOutput:
        return cloze_forward(self, example, training, rng, trace)


def ga_hop(D: Tensor, Q: Tensor) -> Tensor:
    """Gated attention: each passage row times its attended question summary."""
    if D.ndim != 2 or Q.ndim != 2 or D.shape[1] != Q.shape[1]:
        raise DimensionError(f"ga_hop: passage {D.shape} and question {Q.shape} widths differ")
    alpha = T.softmax(D @ Q.T, axis=1)
    return D * (alpha @ Q)


def attention_sum(final: Tensor, q_summary: Tensor, positions: list[list[int]]) -> Tensor:
    """Distribution over candidates from summed position attention."""
    if final.ndim != 2 or q_summary.shape != (final.shape[1],):
        raise DimensionError(f"attention_sum: states {final.shape} vs query {q_summary.shape}")
    if not positions:
        raise ContractError("attention_sum needs at least one candidate")
    for pos in positions:
        if not pos:
            raise ContractError("every candidate needs at least one passage position")
    s = T.softmax(final @ q_summary)
    scores = T.stack([T.sum(T.gather(s, pos)) for pos in positions])
    return T.normalize(scores)


def cloze_forward(model: ClozeModel, example: ClozeExample, training: bool = False,
                  rng: Optional[RngState] = None, trace: bool = False) -> ClozeOutput:
    cfg = model.config
    p = cfg.dropout if training else 0.0
    X = model.embedder(example.passage.flat_tokens)
    Eq = model.embedder(example.question.tokens)
    gates = []
    Hq = None
    for hop in model.hops:
        Hq, hq = encode_question(hop.question_bigru, T.dropout(Eq, p, training, rng))
        E_ps = T.dropout(X, p, training, rng)
        E_pw = T.dropout(X, p, training, rng)
        U, F = hop.gating(example.passage, E_ps, E_pw, hq, p, training, rng)
        if F is not None:
            gates.append(F.data.copy())
        X = ga_hop(U, Hq)
    probs = attention_sum(X, T.mean(Hq, axis=0), example.candidate_positions)
    loss = -T.log(probs[example.answer_index])
    gate_trace = GateTrace(gates) if trace and gates else None
    return ClozeOutput(loss, int(np.argmax(probs.data)), probs.data.copy(), gate_trace)


def build_model(task: str, config, vocab: Vocabulary, embeddings: np.ndarray):
    if task == "span":
        return SpanModel(config, vocab, embeddings)
    if task == "cloze":
        return ClozeModel(config, vocab, embeddings)
    raise ConfigurationError(f"unknown task {task!r}")


def config_dict(config) -> dict:
    return asdict(config)
