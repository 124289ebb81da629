"""GRU and bidirectional GRU encoders, and sentence pooling strategies.

The recurrence is the update/reset formulation::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    hh = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * hh

:func:`gru_step` builds one step out of tape operations. :func:`gru_sequence`
runs a whole sequence as one fused tape node with a hand-written
backpropagation-through-time pass, which is what the models use.
"""

from __future__ import annotations

import enum
from typing import Optional, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .module import Module
from .tensor import RngState, Tensor, make_op

GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


class GruCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: RngState):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / np.sqrt(hidden_dim)
        for gate in "zrh":
            self.uniform_param(f"W_{gate}", (hidden_dim, input_dim), bound, rng)
            self.uniform_param(f"U_{gate}", (hidden_dim, hidden_dim), bound, rng)
            self.zeros_param(f"b_{gate}", (hidden_dim,))

    def __getattr__(self, name):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        raise AttributeError(name)

    def ordered(self) -> tuple[Tensor, ...]:
        return tuple(self._params[n] for n in GRU_PARAM_NAMES)


def gru_step(cell: GruCell, h_prev: Tensor, x: Tensor) -> Tensor:
    if x.shape != (cell.input_dim,) or h_prev.shape != (cell.hidden_dim,):
        raise DimensionError(
            f"gru_step: expected x {(cell.input_dim,)} and h {(cell.hidden_dim,)}, got {x.shape} and {h_prev.shape}")
    z = T.sigmoid(cell.W_z @ x + cell.U_z @ h_prev + cell.b_z)
    r = T.sigmoid(cell.W_r @ x + cell.U_r @ h_prev + cell.b_r)
    hh = T.tanh(cell.W_h @ x + cell.U_h @ (r * h_prev) + cell.b_h)
    return (1.0 - z) * h_prev + z * hh


# ---------------------------------------------------------------------------
# fused sequence node
# ---------------------------------------------------------------------------


def stack_gru(params: Sequence[np.ndarray]):
    """(W, b, Uzr, Uh) with gate blocks stacked in z, r, h order."""
    Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh = params
    W = np.concatenate([Wz, Wr, Wh], axis=0)
    b = np.concatenate([bz, br, bh])
    Uzr = np.concatenate([Uz, Ur], axis=0)
    return W, b, Uzr, np.ascontiguousarray(Uh)


def split_gru_grads(d: int, dW, db, dUzr, dUh) -> tuple:
    """Stacked gradients back to GRU_PARAM_NAMES order."""
    return (dW[:d], dUzr[:d], db[:d], dW[d:2 * d], dUzr[d:], db[d:2 * d], dW[2 * d:], dUh, db[2 * d:])


def gru_sequence(cell: GruCell, X: Tensor, reverse: bool = False) -> Tensor:
    """Run ``cell`` over the rows of ``X`` (T x D_in) from a zero state.

    Returns the T x d hidden states, row t being the state after reading
    row t (for ``reverse=True`` the sequence is read from the end, so row t
    holds the state after reading rows T-1..t). One tape node.
    """
    if X.ndim != 2 or X.shape[1] != cell.input_dim:
        raise DimensionError(f"gru_sequence: expected (T, {cell.input_dim}) input, got {X.shape}")
    if X.shape[0] == 0:
        raise ContractError("gru_sequence: empty sequence")
    params = cell.ordered()
    W, b, Uzr, Uh = stack_gru([p.data for p in params])
    d = cell.hidden_dim
    Xd = X.data
    GX = Xd @ W.T + b
    H, Z, R, HH, HP = kernels.gru_forward(GX, Uzr, Uh, reverse)

    def backward(G):
        dGX = kernels.gru_backward(np.ascontiguousarray(G), Uzr, Uh, reverse, Z, R, HH, HP)
        pgrads = split_gru_grads(d, dGX.T @ Xd, dGX.sum(axis=0), dGX[:, :2 * d].T @ HP, dGX[:, 2 * d:].T @ (R * HP))
        dX = dGX @ W if X.requires_grad else None
        return (dX,) + pgrads

    return make_op(H, (X,) + params, backward)


def gru_sequence_naive(cell: GruCell, X: Tensor, reverse: bool = False) -> Tensor:
    """Per-step loop of :func:`gru_step`; reference for :func:`gru_sequence`."""
    n = X.shape[0]
    if n == 0:
        raise ContractError("gru_sequence: empty sequence")
    h = Tensor(np.zeros(cell.hidden_dim))
    states = [None] * n
    for t in (range(n - 1, -1, -1) if reverse else range(n)):
        h = gru_step(cell, h, X[t])
        states[t] = h
    return T.stack(states)


class BiGruLayer(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: RngState):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.forward_cell = self.add_child("fwd", GruCell(input_dim, hidden_dim, rng))
        self.backward_cell = self.add_child("bwd", GruCell(input_dim, hidden_dim, rng))

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def __call__(self, X: Tensor) -> Tensor:
        return bigru_forward(self, X)


def bigru_forward(layer: BiGruLayer, X: Tensor, naive: bool = False) -> Tensor:
    """Per position: [forward state || backward state], T x 2d."""
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError(f"bigru_forward needs a nonempty T x D sequence, got {X.shape}")
    run = gru_sequence_naive if naive else gru_sequence
    fwd = run(layer.forward_cell, X, reverse=False)
    bwd = run(layer.backward_cell, X, reverse=True)
    return T.concat([fwd, bwd], axis=1)


def encode_question(layer: BiGruLayer, Q: Tensor) -> tuple[Tensor, Tensor]:
    """BiGRU over question embeddings; returns the states and their mean."""
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ContractError("encode_question: empty question")
    states = bigru_forward(layer, Q)
    return states, T.mean(states, axis=0)


# ---------------------------------------------------------------------------
# sentence encoders
# ---------------------------------------------------------------------------


class SentenceEncoderKind(str, enum.Enum):
    AVERAGE_POOLING = "average"
    MAX_POOLING = "max"
    BIGRU_LAST = "last"
    INNER_ATTENTION = "attention"


class InnerAttention(Module):
    """alpha = softmax(w_a^T tanh(W_a H^T)), pooled = H^T alpha."""

    def __init__(self, input_dim: int, attn_dim: int, rng: RngState):
        super().__init__()
        bound = 1.0 / np.sqrt(attn_dim)
        self.W_a = self.uniform_param("W_a", (attn_dim, input_dim), bound, rng)
        self.w_a = self.uniform_param("w_a", (attn_dim,), bound, rng)

    def weights(self, H: Tensor) -> Tensor:
        return T.softmax(T.tanh(H @ self.W_a.T) @ self.w_a)

    def __call__(self, H: Tensor) -> Tensor:
        return self.weights(H) @ H


class SentenceEncoder(Module):
    def __init__(self, kind, hidden_dim: int, rng: Optional[RngState] = None, attn_dim: Optional[int] = None):
        super().__init__()
        self.kind = SentenceEncoderKind(kind)
        self.hidden_dim = hidden_dim
        self.attention = None
        if self.kind is SentenceEncoderKind.INNER_ATTENTION:
            if rng is None:
                raise ConfigurationError("inner attention needs an RngState to initialise its parameters")
            self.attention = self.add_child(
                "inner_attention", InnerAttention(2 * hidden_dim, attn_dim or hidden_dim, rng))

    def __call__(self, hiddens: Tensor, passage) -> Tensor:
        return encode_sentences(hiddens, passage, self.kind, self.attention)


def encode_sentences(hiddens: Tensor, passage, kind, attention: Optional[InnerAttention] = None) -> Tensor:
    """Pool the rows of each sentence into one vector; returns L x 2d."""
    kind = SentenceEncoderKind(kind)
    spans = passage.sentence_spans
    if hiddens.ndim != 2 or hiddens.shape[0] != spans[-1][1]:
        raise ContractError(f"hidden states {hiddens.shape} do not align with a passage of {spans[-1][1]} words")
    width = hiddens.shape[1]
    if kind is SentenceEncoderKind.INNER_ATTENTION and attention is None:
        raise ConfigurationError("inner attention pooling needs its attention parameters")
    if kind is SentenceEncoderKind.BIGRU_LAST and width % 2:
        raise DimensionError("BiGRU-last pooling needs an even hidden width")
    half = width // 2
    rows = []
    for start, stop in spans:
        if kind is SentenceEncoderKind.AVERAGE_POOLING:
            rows.append(T.mean(T.slice_rows(hiddens, start, stop), axis=0))
        elif kind is SentenceEncoderKind.MAX_POOLING:
            rows.append(T.max(T.slice_rows(hiddens, start, stop), axis=0))
        elif kind is SentenceEncoderKind.BIGRU_LAST:
            rows.append(T.concat([hiddens[stop - 1, :half], hiddens[start, half:]]))
        else:
            rows.append(attention(T.slice_rows(hiddens, start, stop)))
    return T.stack(rows)
