"""Dialogue encoders (BiLSTM and small transformer) and role context splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import RoleMasks
from .interaction import MultiHeadAttention

log = logging.getLogger(__name__)


class RoleEmptyError(ValueError):
    """An example has no input positions for one of the roles."""


@dataclass
class EncoderOutput:
    H: Tensor                 # [B, n, d_ctx]
    final_state: tuple | None  # (h, c) summaries for decoder initialisation
    pad_mask: np.ndarray      # [B, n]


def lstm_cell(x, state, W_x, W_h, b):
    """One LSTM step: gates i, f, o via sigmoid, candidate via tanh."""
    h, c = state
    return _lstm_gates(ad.matmul(x, W_x) + ad.matmul(h, W_h) + b, c)


def _lstm_gates(pre, c):
    hd = pre.shape[-1] // 4
    ifo = ad.sigmoid(pre[..., : 3 * hd])
    g = ad.tanh(pre[..., 3 * hd:])
    i, f, o = ifo[..., :hd], ifo[..., hd: 2 * hd], ifo[..., 2 * hd:]
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


class LSTM:
    def __init__(self, store, name, input_dim, hidden_dim):
        self.hidden_dim = hidden_dim
        self.W_x = store.add(f"{name}.W_x", (input_dim, 4 * hidden_dim))
        self.W_h = store.add(f"{name}.W_h", (hidden_dim, 4 * hidden_dim))
        self.b = store.add(f"{name}.b", (4 * hidden_dim,), "zeros")

    def cell(self, x, state):
        return lstm_cell(x, state, self.W_x, self.W_h, self.b)

    def zero_state(self, batch, dtype):
        z = Tensor(np.zeros((batch, self.hidden_dim), dtype=dtype))
        return z, z

    def run(self, xs, state, mask=None, reverse=False):
        """Run over ``xs`` [B, T, in]; returns (outputs [B, T, h], final state).

        Where ``mask`` is 0 the state is carried through unchanged."""
        xs = ad.as_tensor(xs)
        T = xs.shape[1]
        xw = ad.matmul(xs, self.W_x) + self.b
        h, c = state
        outs = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            h_new, c_new = _lstm_gates(xw[:, t] + ad.matmul(h, self.W_h), c)
            if mask is not None and not mask[:, t].all():
                m = mask[:, t: t + 1].astype(xs.dtype)
                h_new = h_new * m + h * (1 - m)
                c_new = c_new * m + c * (1 - m)
            h, c = h_new, c_new
            outs[t] = h
        return ad.stack(outs, axis=1), (h, c)


class BiLSTMEncoder:
    def __init__(self, store, emb_dim, hidden_dim, name="enc"):
        self.fw = LSTM(store, f"{name}.fw", emb_dim, hidden_dim)
        self.bw = LSTM(store, f"{name}.bw", emb_dim, hidden_dim)
        self.out_dim = 2 * hidden_dim

    def __call__(self, x_emb, pad_mask) -> EncoderOutput:
        """``H_i = [forward_i; backward_i]``; final state = (last forward, first backward)."""
        x_emb = ad.as_tensor(x_emb)
        B = x_emb.shape[0]
        Hf, (hf, cf) = self.fw.run(x_emb, self.fw.zero_state(B, x_emb.dtype), pad_mask)
        Hb, (hb, cb) = self.bw.run(x_emb, self.bw.zero_state(B, x_emb.dtype), pad_mask, reverse=True)
        H = ad.concat([Hf, Hb], -1)
        return EncoderOutput(H, (ad.concat([hf, hb], -1), ad.concat([cf, cb], -1)), pad_mask)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc * ad.power(var + eps, -0.5) * gain + bias


class LayerNorm:
    def __init__(self, store, name, dim):
        self.g = store.add(f"{name}.g", (dim,), "ones")
        self.b = store.add(f"{name}.b", (dim,), "zeros")

    def __call__(self, x):
        return layer_norm(x, self.g, self.b)


class FeedForward:
    def __init__(self, store, name, d_model, d_ff):
        self.W1 = store.add(f"{name}.W1", (d_model, d_ff))
        self.b1 = store.add(f"{name}.b1", (d_ff,), "zeros")
        self.W2 = store.add(f"{name}.W2", (d_ff, d_model))
        self.b2 = store.add(f"{name}.b2", (d_model,), "zeros")

    def __call__(self, x):
        return ad.matmul(ad.relu(ad.matmul(x, self.W1) + self.b1), self.W2) + self.b2


class TransformerEncoderLayer:
    def __init__(self, store, name, d_model, d_ff, heads):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d_model, heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d_model)
        self.ff = FeedForward(store, f"{name}.ff", d_model, d_ff)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d_model)

    def __call__(self, x, pad_mask):
        a, att = self.attn(x, x, pad_mask)
        x = self.ln1(x + a)
        return self.ln2(x + self.ff(x)), att


class TransformerEncoder:
    def __init__(self, store, d_model, d_ff, heads, layers, max_positions, name="enc"):
        self.pos = store.add(f"{name}.pos", (max_positions, d_model), "normal", 0.1)
        self.layers = [TransformerEncoderLayer(store, f"{name}.layer{i}", d_model, d_ff, heads)
                       for i in range(layers)]
        self.out_dim = d_model
        self.attentions = []

    def __call__(self, x_emb, pad_mask) -> EncoderOutput:
        x_emb = ad.as_tensor(x_emb)
        n = x_emb.shape[1]
        if n > self.pos.shape[0]:
            raise ValueError(f"sequence length {n} exceeds positional table size {self.pos.shape[0]}")
        x = x_emb + ad.getitem(ad.as_tensor(self.pos), slice(0, n))
        self.attentions = []
        for layer in self.layers:
            x, att = layer(x, pad_mask)
            self.attentions.append(att)
        return EncoderOutput(x, None, pad_mask)


@dataclass
class ContextView:
    H: Tensor
    mask: np.ndarray

    def positions(self, b=0):
        return np.flatnonzero(self.mask[b])


def split_contexts(H, masks: RoleMasks):
    """User and agent views of ``H``: same rows, each paired with its role mask."""
    for role, m in (("user", masks.user), ("agent", masks.agent)):
        empty = np.flatnonzero(np.atleast_2d(m).sum(axis=-1) == 0)
        if empty.size:
            raise RoleEmptyError(f"no {role} positions in batch rows {empty.tolist()}")
    return ContextView(H, masks.user), ContextView(H, masks.agent)
