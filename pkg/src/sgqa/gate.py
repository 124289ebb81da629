"""Question-aware sentence matching and dimension-wise sentence gating.

For sentence i with pooled vector h_i and pooled question vector q, the
matching vector is ``[h_i; q; h_i * q; |h_i - q|]`` (8d). Every passage word
j of sentence i, with word-level vector v_ij (2d), is then fused with it::

    z_ij = tanh(Wz1 m_i + Wz2 v_ij + b_z)
    f_ij = sigmoid(Wf1 m_i + Wf2 v_ij + b_f)
    u_ij = (1 - f_ij) * v_ij + f_ij * z_ij

The scalar-gate and concatenation combiners are ablation variants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import BiGruLayer, SentenceEncoder, bigru_forward
from .errors import ContractError, DimensionError
from .module import Module
from .tensor import RngState, Tensor


class CombinerKind(str, enum.Enum):
    CONCATENATION = "concat"
    SCALAR_GATE = "scalar"
    VECTOR_GATE = "vector"


@dataclass(frozen=True)
class MatchingConfig:
    use_matching: bool = True

    def input_dim(self, hidden_dim: int) -> int:
        return 8 * hidden_dim if self.use_matching else 2 * hidden_dim


def match_sentence(h_p: Tensor, h_q: Tensor) -> Tensor:
    """[h_p; h_q; h_p * h_q; |h_p - h_q|] for two 2d vectors."""
    if h_p.ndim != 1 or h_p.shape != h_q.shape:
        raise DimensionError(f"match_sentence: expected two equal-length vectors, got {h_p.shape} and {h_q.shape}")
    return T.concat([h_p, h_q, h_p * h_q, T.absolute(h_p - h_q)])


def match_sentences(H: Tensor, h_q: Tensor) -> Tensor:
    """Row-wise :func:`match_sentence` of every sentence vector (L x 2d) against h_q."""
    if H.ndim != 2 or h_q.ndim != 1 or H.shape[1] != h_q.shape[0]:
        raise DimensionError(f"match_sentences: cannot match {H.shape} against {h_q.shape}")
    Q = T.gather(T.reshape(h_q, (1, h_q.shape[0])), np.zeros(H.shape[0], dtype=np.int64))
    return T.concat([H, Q, H * Q, T.absolute(H - Q)], axis=1)


class SentenceGate(Module):
    """Combiner parameters for one of the three combiner kinds.

    ``input_dim`` is the width of the sentence-side input (8d with matching,
    2d without) and ``word_dim`` the width of word vectors (2d).
    """

    def __init__(self, kind, input_dim: int, word_dim: int, rng: RngState):
        super().__init__()
        self.kind = CombinerKind(kind)
        self.input_dim = input_dim
        self.word_dim = word_dim
        bound = 1.0 / np.sqrt(word_dim)
        if self.kind is CombinerKind.CONCATENATION:
            self.uniform_param("W_c", (word_dim, word_dim + input_dim), bound, rng)
            self.zeros_param("b_c", (word_dim,))
            return
        self.uniform_param("W_z1", (word_dim, input_dim), bound, rng)
        self.uniform_param("W_z2", (word_dim, word_dim), bound, rng)
        self.zeros_param("b_z", (word_dim,))
        if self.kind is CombinerKind.VECTOR_GATE:
            self.uniform_param("W_f1", (word_dim, input_dim), bound, rng)
            self.uniform_param("W_f2", (word_dim, word_dim), bound, rng)
            self.zeros_param("b_f", (word_dim,))
        else:
            self.uniform_param("w_f1", (input_dim,), bound, rng)
            self.uniform_param("w_f2", (word_dim,), bound, rng)
            self.zeros_param("b_f", (1,))

    def __getattr__(self, name):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        raise AttributeError(name)

    @property
    def has_gate(self) -> bool:
        return self.kind is not CombinerKind.CONCATENATION


def gate_word(params: SentenceGate, h_tilde: Tensor, v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Vector gate for one word: returns (u, f, z)."""
    if params.kind is not CombinerKind.VECTOR_GATE:
        raise ContractError("gate_word needs vector-gate parameters")
    if h_tilde.shape != (params.input_dim,) or v.shape != (params.word_dim,):
        raise DimensionError(
            f"gate_word: expected {(params.input_dim,)} and {(params.word_dim,)}, got {h_tilde.shape} and {v.shape}")
    z = T.tanh(params.W_z1 @ h_tilde + params.W_z2 @ v + params.b_z)
    f = T.sigmoid(params.W_f1 @ h_tilde + params.W_f2 @ v + params.b_f)
    u = (1.0 - f) * v + f * z
    return u, f, z


def combine(params: SentenceGate, h_input: Tensor, v: Tensor) -> tuple[Tensor, Optional[Tensor]]:
    """Fuse one word vector with its sentence input; returns (output, gate or None)."""
    if h_input.shape != (params.input_dim,) or v.shape != (params.word_dim,):
        raise DimensionError(
            f"combine: expected {(params.input_dim,)} and {(params.word_dim,)}, got {h_input.shape} and {v.shape}")
    if params.kind is CombinerKind.VECTOR_GATE:
        u, f, _ = gate_word(params, h_input, v)
        return u, f
    if params.kind is CombinerKind.CONCATENATION:
        return params.W_c @ T.concat([v, h_input]) + params.b_c, None
    z = T.tanh(params.W_z1 @ h_input + params.W_z2 @ v + params.b_z)
    f = T.sigmoid(T.reshape(params.w_f1 @ h_input + params.w_f2 @ v, (1,)) + params.b_f)
    f_vec = T.reshape(f, (1, 1)) @ Tensor(np.ones((1, params.word_dim)))
    f_vec = T.reshape(f_vec, (params.word_dim,))
    return (1.0 - f_vec) * v + f_vec * z, f_vec


def apply_sentence_gate(passage, V: Tensor, S: Tensor, params: SentenceGate) -> tuple[Tensor, Optional[Tensor]]:
    """Gate every passage word against its own sentence's row of ``S``.

    ``V`` is M x 2d, ``S`` is L x k. Returns (U: M x 2d, F: M x 2d gate
    values, or None for the concatenation combiner).
    """
    M = len(passage.flat_tokens)
    if V.shape != (M, params.word_dim):
        raise ContractError(f"word vectors {V.shape} do not align with {M} passage words")
    if S.shape != (passage.n_sentences, params.input_dim):
        raise ContractError(f"sentence inputs {S.shape} do not align with {passage.n_sentences} sentences")
    rows = T.gather(S, passage.sentence_index)
    if params.kind is CombinerKind.CONCATENATION:
        return T.add_bias(T.concat([V, rows], axis=1) @ params.W_c.T, params.b_c), None
    Z = T.tanh(T.add_bias(rows @ params.W_z1.T + V @ params.W_z2.T, params.b_z))
    if params.kind is CombinerKind.VECTOR_GATE:
        F = T.sigmoid(T.add_bias(rows @ params.W_f1.T + V @ params.W_f2.T, params.b_f))
    else:
        s = T.reshape(rows @ params.w_f1 + V @ params.w_f2, (M, 1))
        f = T.sigmoid(T.add_bias(s, params.b_f))
        F = f @ Tensor(np.ones((1, params.word_dim)))
    U = (1.0 - F) * V + F * Z
    return U, F


class SentenceGatingNetwork(Module):
    """Sentence encoding, question-aware matching and gating for one passage.

    Owns the sentence-encoding BiGRU (PS), the word BiGRU (PW), the pooling
    strategy and the combiner. The question encoder lives with the QA head
    so the head can reuse its per-word states.
    """

    def __init__(self, input_dim: int, hidden_dim: int, encoder_kind, combiner_kind,
                 matching: MatchingConfig, rng: RngState):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.matching = matching
        self.sentence_bigru = self.add_child("bigru_ps", BiGruLayer(input_dim, hidden_dim, rng))
        self.word_bigru = self.add_child("bigru_pw", BiGruLayer(input_dim, hidden_dim, rng))
        self.sentence_encoder = self.add_child(
            "sentence_encoder", SentenceEncoder(encoder_kind, hidden_dim, rng))
        self.gate = self.add_child(
            "gate", SentenceGate(combiner_kind, matching.input_dim(hidden_dim), 2 * hidden_dim, rng))

    def __call__(self, passage, E_ps: Tensor, E_pw: Tensor, h_q: Tensor,
                 dropout_rate: float = 0.0, training: bool = False,
                 rng: Optional[RngState] = None) -> tuple[Tensor, Optional[Tensor]]:
        """``E_ps`` and ``E_pw`` are the (separately dropped-out) passage embeddings."""
        H = bigru_forward(self.sentence_bigru, E_ps)
        V = bigru_forward(self.word_bigru, E_pw)
        H = T.dropout(H, dropout_rate, training, rng)
        V = T.dropout(V, dropout_rate, training, rng)
        S = self.sentence_encoder(H, passage)
        if self.matching.use_matching:
            S = match_sentences(S, h_q)
        return apply_sentence_gate(passage, V, S, self.gate)
