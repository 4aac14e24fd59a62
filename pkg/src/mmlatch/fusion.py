"""Cross-modal attention fusion and the recurrent regression head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import LSTMParams, attention_weights, lstm
from .module import Linear, Module, parameter, xavier_uniform
from .tensor import ShapeError, Tensor

# Order of the seven blocks in the fused vector.
FUSED_BLOCKS = ("r_A", "r_T", "r_V", "a_AVT", "m_AV", "m_TV", "m_TA")


class CrossAttentionParams(Module):
    """Query projection for modality k, key/value projections for modality l."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.w_q = parameter(xavier_uniform(rng, d, d))
        self.w_k = parameter(xavier_uniform(rng, d, d))
        self.w_v = parameter(xavier_uniform(rng, d, d))


def _check_pair(r_k: Tensor, r_l: Tensor) -> None:
    if r_k.ndim != 3 or r_k.shape != r_l.shape:
        raise ShapeError(f"cross-modal attention needs equal (B, N, d) inputs, got {r_k.shape} and {r_l.shape}")


def cross_attention(r_k: Tensor, r_l: Tensor, params: CrossAttentionParams, return_weights: bool = False):
    """a_kl = softmax(Q_k K_l^T / sqrt(d)) V_l + r_k, attending over positions of l."""
    _check_pair(r_k, r_l)
    weights = attention_weights(T.matmul(r_k, params.w_q), T.matmul(r_l, params.w_k))
    out = T.matmul(weights, T.matmul(r_l, params.w_v)) + r_k
    return (out, weights) if return_weights else out


def symmetric_attention(r_k: Tensor, r_l: Tensor, params_kl: CrossAttentionParams, params_lk: CrossAttentionParams) -> Tensor:
    _check_pair(r_k, r_l)
    return cross_attention(r_k, r_l, params_kl) + cross_attention(r_l, r_k, params_lk)


class FusionParams(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        # one directed parameter set per ordered pair, plus a dedicated one for a_AVT
        self.pairs = {
            name: CrossAttentionParams(d, rng)
            for name in ("TA", "AT", "TV", "VT", "AV", "VA")
        }
        self.avt = CrossAttentionParams(d, rng)


def fuse(r_A: Tensor, r_T: Tensor, r_V: Tensor, params: FusionParams) -> Tensor:
    """Concatenate unimodal and cross-modal blocks into (B, N, 7d)."""
    for r in (r_T, r_V):
        _check_pair(r_A, r)
    p = params.pairs
    m_TA = symmetric_attention(r_T, r_A, p["TA"], p["AT"])
    m_TV = symmetric_attention(r_T, r_V, p["TV"], p["VT"])
    m_AV = symmetric_attention(r_A, r_V, p["AV"], p["VA"])
    a_AVT = cross_attention(m_AV, r_T, params.avt)
    return T.concat([r_A, r_T, r_V, a_AVT, m_AV, m_TV, m_TA], axis=-1)


class RegressionHead(Module):
    def __init__(self, d: int, rng: np.random.Generator, dropout: float = 0.0):
        self.d = d
        self.dropout = dropout
        self.lstm = LSTMParams(7 * d, d, rng)
        self.out = Linear(d, 1, rng)


def regress(o: Tensor, head: RegressionHead, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Unidirectional LSTM over the fused sequence; linear map of the last hidden state to (B, 1)."""
    if o.ndim != 3 or o.shape[2] != 7 * head.d:
        raise ShapeError(f"regress expects (B, N, {7 * head.d}) input, got {o.shape}")
    o = T.dropout(o, head.dropout, training, rng)
    last = lstm(o, head.lstm)[-1]
    return head.out(last)
