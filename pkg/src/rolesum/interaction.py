"""Role interactions: role-masked dual cross attention, the p_role gate, the
attention divergence loss and the inter-decoder role attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def detach(t) -> Tensor:
    return Tensor(ad.as_tensor(t).value)


def _with_time(q):
    """Queries come as [B, d] (one step) or [B, T, d]; work internally on [B, T, d]."""
    q = ad.as_tensor(q)
    if q.ndim == 2:
        return ad.reshape(q, (q.shape[0], 1, q.shape[1])), True
    return q, False


def _mask3(mask, B, T, S):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[:, None, :]
    return np.broadcast_to(m, (B, T, S))


class AdditiveAttention:
    """Bahdanau scoring ``v^T tanh(W_q q + W_k k_i + b)`` with a masked softmax."""

    def __init__(self, store, name, query_dim, key_dim, attn_dim):
        self.W_q = store.add(f"{name}.W_q", (query_dim, attn_dim))
        self.W_k = store.add(f"{name}.W_k", (key_dim, attn_dim))
        self.b = store.add(f"{name}.b", (attn_dim,), "zeros")
        self.v = store.add(f"{name}.v", (attn_dim, 1))

    def project_keys(self, keys):
        return ad.matmul(keys, self.W_k)

    def __call__(self, query, keys, mask, keys_proj=None):
        """Return ``(distribution, context)``; shapes follow ``query`` ([B, d] or [B, T, d])."""
        q, squeeze = _with_time(query)
        keys = ad.as_tensor(keys)
        B, T, _ = q.shape
        S = keys.shape[1]
        kp = self.project_keys(keys) if keys_proj is None else keys_proj
        a = kp.shape[-1]
        qp = ad.matmul(q, self.W_q) + self.b
        pre = ad.broadcast_to(ad.reshape(qp, (B, T, 1, a)), (B, T, S, a)) + ad.reshape(kp, (B, 1, S, a))
        scores = ad.reshape(ad.matmul(ad.tanh(pre), self.v), (B, T, S))
        dist = ad.masked_softmax(scores, _mask3(mask, B, T, S))
        ctx = ad.matmul(dist, keys)
        if squeeze:
            dist = ad.reshape(dist, (B, S))
            ctx = ad.reshape(ctx, (B, keys.shape[2]))
        return dist, ctx


def additive_attention(attn: AdditiveAttention, query, keys, mask):
    return attn(query, keys, mask)


class MultiHeadAttention:
    """Scaled dot-product attention ``softmax(q.k / sqrt(d_head))`` over several heads.

    Returns the projected output and the head-averaged distribution."""

    def __init__(self, store, name, d_model, heads):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.W_q = store.add(f"{name}.W_q", (d_model, d_model))
        self.W_k = store.add(f"{name}.W_k", (d_model, d_model))
        self.W_v = store.add(f"{name}.W_v", (d_model, d_model))
        self.W_o = store.add(f"{name}.W_o", (d_model, d_model))

    def _split(self, x):
        B, T, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self.heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x_q, x_kv, mask):
        x_q, x_kv = ad.as_tensor(x_q), ad.as_tensor(x_kv)
        B, T, d = x_q.shape
        S = x_kv.shape[1]
        q = self._split(ad.matmul(x_q, self.W_q))
        k = self._split(ad.matmul(x_kv, self.W_k))
        v = self._split(ad.matmul(x_kv, self.W_v))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        m = _mask3(mask, B, T, S)[:, None]
        att = ad.masked_softmax(scores, np.broadcast_to(m, (B, self.heads, T, S)))
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        return ad.matmul(out, self.W_o), ad.mean(att, axis=1)


@dataclass
class CrossAttnResult:
    att_same: Tensor
    att_cross: Tensor
    c_same: Tensor
    c_cross: Tensor


def other_role(role):
    return "agent" if role == "user" else "user"


def cross_attention_dual(h_dec, H, masks, same_attn: AdditiveAttention, cross_attn: AdditiveAttention,
                         role: str, keys_proj=None) -> CrossAttnResult:
    """Attend separately to the decoder's own role context and the other role's context.

    ``keys_proj`` optionally carries precomputed ``(same, cross)`` key projections."""
    kp_same, kp_cross = keys_proj if keys_proj is not None else (None, None)
    att_s, c_s = same_attn(h_dec, H, masks.of(role), kp_same)
    att_c, c_c = cross_attn(h_dec, H, masks.of(other_role(role)), kp_cross)
    return CrossAttnResult(att_s, att_c, c_s, c_c)


class RoleGate:
    def __init__(self, store, name, in_dim):
        self.w = store.add(f"{name}.w", (in_dim, 1))
        self.b = store.add(f"{name}.b", (1,), "zeros")

    def __call__(self, h_dec, c_same, c_cross):
        return ad.sigmoid(ad.matmul(ad.concat([h_dec, c_same, c_cross], -1), self.w) + self.b)


def combine_attention_gate(gate: RoleGate | None, h_dec, c_same, c_cross, att_same, att_cross, p_role=None):
    """Mix the two role-restricted distributions with ``p_role``; returns ``(p_role, att_final)``.

    ``p_role`` may be supplied directly (a Tensor or number) instead of computed by ``gate``."""
    if p_role is None:
        p_role = gate(h_dec, c_same, c_cross)
    elif not isinstance(p_role, Tensor):
        p_role = Tensor(np.full(tuple(ad.as_tensor(att_same).shape[:-1]) + (1,), p_role,
                                dtype=ad.as_tensor(att_same).dtype))
    att_final = p_role * att_same + (1.0 - p_role) * att_cross
    return p_role, att_final


class AttnAccumulator:
    """Running sum of attention distributions over (non-pad) decoder steps."""

    def __init__(self):
        self.total = None
        self.count = None

    def push(self, dist, weight=None):
        """Add one step ([B, n] with weight [B]) or a block of steps ([B, T, n] with weight [B, T])."""
        dist = ad.as_tensor(dist)
        if weight is None:
            weight = np.ones(dist.shape[:-1])
        weight = np.asarray(weight, dtype=dist.dtype)
        step_sum = dist * weight[..., None]
        n = weight
        if dist.ndim == 3:
            step_sum = ad.sum_(step_sum, axis=1)
            n = weight.sum(axis=1)
        self.total = step_sum if self.total is None else self.total + step_sum
        self.count = n if self.count is None else self.count + n

    def mean(self):
        if self.count is None or np.any(self.count <= 0):
            raise ValueError("attention accumulator has a zero step count")
        return self.total * (1.0 / self.count)[:, None]


def attention_divergence_loss(cross_acc, same_acc, detach_same=False):
    """Batch mean of ``KL(Avg(other decoder's cross-role attention) || Avg(own same-role attention))``."""
    p = cross_acc.mean() if isinstance(cross_acc, AttnAccumulator) else ad.as_tensor(cross_acc)
    q = same_acc.mean() if isinstance(same_acc, AttnAccumulator) else ad.as_tensor(same_acc)
    if detach_same:
        q = detach(q)
    kl = ad.kl_divergence(p, q)
    return ad.mean(kl) if kl.ndim else kl


@dataclass
class RoleAttnResult:
    weights: Tensor
    r: Tensor


def role_attention(attn: AdditiveAttention, h_t, partner_states, window=None, keys_proj=None) -> RoleAttnResult:
    """Attend from ``h_t`` over the partner decoder's states ``1..t'``.

    ``partner_states`` is [B, S, h]; ``window`` ([B, S] or [B, T, S]) marks the
    admissible partner steps (all of them when omitted)."""
    partner_states = ad.as_tensor(partner_states)
    if window is None:
        window = np.ones(partner_states.shape[:2])
    w, r = attn(h_t, partner_states, window, keys_proj)
    return RoleAttnResult(w, r)


def role_window(T, S, partner_lengths):
    """[B, T, S] mask: step ``i`` may see partner steps ``j <= i`` with ``j < partner length``."""
    partner_lengths = np.asarray(partner_lengths)
    causal = np.arange(S)[None, :] <= np.arange(T)[:, None]
    return (causal[None] & (np.arange(S)[None, None, :] < partner_lengths[:, None, None])).astype(np.float64)
