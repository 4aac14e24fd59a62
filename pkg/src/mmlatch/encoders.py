"""Unimodal encoders: a summed bidirectional LSTM followed by dot-product self-attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .module import Module, parameter, xavier_uniform
from .tensor import ShapeError, Tensor

GATES = ("input", "forget", "cell", "output")


class LSTMParams(Module):
    """One LSTM direction.

    The four gate matrices are stored side by side (gate order input, forget,
    cell, output) so a timestep needs one input and one recurrent product.
    Each gate block is Xavier-initialised on its own ``d_in x d`` or ``d x d``
    shape; biases start at zero.
    """

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d = d
        self.w_ih = parameter(np.concatenate([xavier_uniform(rng, d_in, d) for _ in GATES], axis=1))
        self.w_hh = parameter(np.concatenate([xavier_uniform(rng, d, d) for _ in GATES], axis=1))
        self.bias = parameter(np.zeros(4 * d))

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views of (input weights, recurrent weights, bias) for one gate."""
        k = GATES.index(name)
        cols = slice(k * self.d, (k + 1) * self.d)
        return self.w_ih.data[:, cols], self.w_hh.data[:, cols], self.bias.data[cols]


def _cell_from_projection(xw_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams):
    d = params.d
    z = xw_t + T.matmul(h_prev, params.w_hh)
    sig = T.sigmoid(z[:, : 2 * d])
    i, f = sig[:, :d], sig[:, d:]
    g = T.tanh(z[:, 2 * d : 3 * d])
    o = T.sigmoid(z[:, 3 * d :])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on (B, d_in) input with (B, d) states."""
    if x_t.ndim != 2 or x_t.shape[1] != params.d_in:
        raise ShapeError(f"lstm_cell: input shape {x_t.shape} does not match d_in={params.d_in}")
    expected = (x_t.shape[0], params.d)
    if h_prev.shape != expected or c_prev.shape != expected:
        raise ShapeError(f"lstm_cell: state shapes {h_prev.shape}, {c_prev.shape}; expected {expected}")
    xw_t = T.matmul(x_t, params.w_ih) + params.bias
    return _cell_from_projection(xw_t, h_prev, c_prev, params)


def lstm(x: Tensor, params: LSTMParams, reverse: bool = False) -> list[Tensor]:
    """Run one direction over (B, N, d_in); returns the N hidden states in input order."""
    if x.ndim != 3 or x.shape[2] != params.d_in:
        raise ShapeError(f"lstm: input shape {x.shape} does not match d_in={params.d_in}")
    batch, n = x.shape[0], x.shape[1]
    if n < 1:
        raise ShapeError("lstm: empty sequence")
    xw = T.matmul(x, params.w_ih) + params.bias
    h = Tensor(np.zeros((batch, params.d)))
    c = Tensor(np.zeros((batch, params.d)))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    out: list[Tensor | None] = [None] * n
    for t in steps:
        h, c = _cell_from_projection(xw[:, t, :], h, c, params)
        out[t] = h
    return out


def bilstm(x: Tensor, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    """Bidirectional LSTM whose two directions are summed: (B, N, d_in) -> (B, N, d)."""
    if x.ndim == 3 and x.shape[1] == 0:
        raise ShapeError("bilstm: empty sequence")
    forward = lstm(x, fwd)
    backward = lstm(x, bwd, reverse=True)
    return T.stack([hf + hb for hf, hb in zip(forward, backward)], axis=1)


class SelfAttentionParams(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.w_q = parameter(xavier_uniform(rng, d, d))
        self.w_k = parameter(xavier_uniform(rng, d, d))
        self.w_v = parameter(xavier_uniform(rng, d, d))


def attention_weights(queries: Tensor, keys: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) over the key axis: (B, Nq, Nk)."""
    scores = T.matmul(queries, T.transpose(keys))
    return T.softmax(T.scale(scores, 1.0 / math.sqrt(queries.shape[-1])), axis=-1)


def self_attention(h: Tensor, params: SelfAttentionParams, return_weights: bool = False):
    if h.ndim != 3 or h.shape[2] != params.d:
        raise ShapeError(f"self_attention: input shape {h.shape} does not match d={params.d}")
    weights = attention_weights(T.matmul(h, params.w_q), T.matmul(h, params.w_k))
    out = T.matmul(weights, T.matmul(h, params.w_v)) + h
    return (out, weights) if return_weights else out


class ModalityEncoder(Module):
    """BiLSTM + self-attention for one modality, with dropout on input and output."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator, dropout: float = 0.0):
        self.d_in = d_in
        self.d = d
        self.dropout = dropout
        self.fwd = LSTMParams(d_in, d, rng)
        self.bwd = LSTMParams(d_in, d, rng)
        self.attention = SelfAttentionParams(d, rng)

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return encode_modality(x, self, training, rng)


def encode_modality(
    x: Tensor,
    encoder: ModalityEncoder,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, N, d_k) raw features -> (B, N, d) unimodal representation."""
    if x.ndim != 3 or x.shape[2] != encoder.d_in:
        raise ShapeError(
            f"encoder expects features of dimension {encoder.d_in}, got input shape {x.shape}"
        )
    x = T.dropout(x, encoder.dropout, training, rng)
    r = self_attention(bilstm(x, encoder.fwd, encoder.bwd), encoder.attention)
    return T.dropout(r, encoder.dropout, training, rng)
