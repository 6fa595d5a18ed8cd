"""Role decoders: output fusion, copy distribution, coverage and the
transformer decoder layer with both interactions."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoder import LSTM, FeedForward, LayerNorm
from .interaction import (AdditiveAttention, MultiHeadAttention, RoleGate, combine_attention_gate,
                          cross_attention_dual, other_role, role_attention, role_window)


class FusionHead:
    """One tanh hidden layer over ``[h; r; c_same; c_cross]`` then a vocabulary softmax."""

    def __init__(self, store, name, in_dim, hidden_dim, vocab_size):
        self.W1 = store.add(f"{name}.W1", (in_dim, hidden_dim))
        self.b1 = store.add(f"{name}.b1", (hidden_dim,), "zeros")
        self.W2 = store.add(f"{name}.W2", (hidden_dim, vocab_size))
        self.b2 = store.add(f"{name}.b2", (vocab_size,), "zeros")


def fuse_and_project(head: FusionHead, *parts):
    """``P_vocab = softmax(W2 tanh(W1 [parts] + b1) + b2)``; ``None`` parts are skipped."""
    x = ad.concat([p for p in parts if p is not None], -1)
    return ad.softmax(ad.matmul(ad.tanh(ad.matmul(x, head.W1) + head.b1), head.W2) + head.b2)


def pointer_final_distribution(P_vocab, p_gen, att_final, ext_ids, ext_size):
    """``p_gen * P_vocab(w) + (1 - p_gen) * sum_{i: x_i = w} att_i`` over the extended vocabulary.

    ``P_vocab`` [B, (T,) V], ``p_gen`` [B, (T,) 1], ``att_final`` [B, (T,) n], ``ext_ids`` [B, n]."""
    P_vocab, p_gen, att_final = ad.as_tensor(P_vocab), ad.as_tensor(p_gen), ad.as_tensor(att_final)
    V = P_vocab.shape[-1]
    if ext_size > V:
        zeros = np.zeros(P_vocab.shape[:-1] + (ext_size - V,), dtype=P_vocab.dtype)
        P_vocab = ad.concat([P_vocab, zeros], -1)
    copy = ad.scatter_add(att_final, ext_ids, ext_size)
    return p_gen * P_vocab + (1.0 - p_gen) * copy


def gold_probability(P_vocab, p_gen, att_final, ext_ids, gold):
    """Final-distribution probability of ``gold`` [B, T] without materialising the extended vocabulary."""
    V = P_vocab.shape[-1]
    gold = np.asarray(gold)
    in_vocab = (gold < V).astype(P_vocab.dtype)
    gen = ad.pick(P_vocab, np.where(gold < V, gold, 0)) * in_vocab
    match = (np.asarray(ext_ids)[:, None, :] == gold[:, :, None]).astype(P_vocab.dtype)
    copy = ad.sum_(att_final * match, axis=-1)
    pg = ad.reshape(p_gen, gold.shape)
    return pg * gen + (1.0 - pg) * copy


def coverage_update_and_loss(coverage, att_final):
    """Returns ``(coverage + att, sum_i min(att_i, coverage_i))``."""
    att_final = ad.as_tensor(att_final)
    if coverage is None:
        coverage = np.zeros(att_final.shape, dtype=att_final.dtype)
    loss = ad.sum_(ad.minimum(att_final, coverage), axis=-1)
    return att_final + coverage, loss


def coverage_teacher_forced(att_final):
    """Per-step coverage losses for a whole teacher-forced block ``att_final`` [B, T, n].

    The coverage at step t is the sum of steps < t, computed as one strictly
    lower-triangular matmul."""
    att_final = ad.as_tensor(att_final)
    T = att_final.shape[1]
    lower = np.tril(np.ones((T, T), dtype=att_final.dtype), -1)
    cov = ad.matmul(lower, att_final)
    return ad.sum_(ad.minimum(att_final, cov), axis=-1)


class RecurrentRoleDecoder:
    """Pointer-generator LSTM decoder for one role, with optional role interactions."""

    def __init__(self, store, role, enc_dim, emb_dim, hidden_dim, vocab_size, cross=True,
                 self_interaction=True, role_attn=None):
        p = f"dec.{role}"
        self.role = role
        self.cross = cross
        self.self_interaction = self_interaction
        self.bridge_h = store.add(f"{p}.bridge_h.W", (enc_dim, hidden_dim))
        self.bridge_hb = store.add(f"{p}.bridge_h.b", (hidden_dim,), "zeros")
        self.bridge_c = store.add(f"{p}.bridge_c.W", (enc_dim, hidden_dim))
        self.bridge_cb = store.add(f"{p}.bridge_c.b", (hidden_dim,), "zeros")
        self.lstm = LSTM(store, f"{p}.lstm", emb_dim, hidden_dim)
        if cross:
            self.att_same = AdditiveAttention(store, f"{p}.att_same", hidden_dim, enc_dim, hidden_dim)
            self.att_cross = AdditiveAttention(store, f"{p}.att_cross", hidden_dim, enc_dim, hidden_dim)
            self.gate = RoleGate(store, f"{p}.p_role", hidden_dim + 2 * enc_dim)
        else:
            self.att_all = AdditiveAttention(store, f"{p}.att", hidden_dim, enc_dim, hidden_dim)
        if self_interaction:
            self.role_attn = role_attn or AdditiveAttention(store, f"{p}.role_att", hidden_dim, hidden_dim, hidden_dim)
        fuse_in = hidden_dim + (hidden_dim if self_interaction else 0) + (2 if cross else 1) * enc_dim
        self.head = FusionHead(store, f"{p}.fuse", fuse_in, hidden_dim, vocab_size)
        self.p_gen_w = store.add(f"{p}.p_gen.w", (enc_dim + hidden_dim + emb_dim, 1))
        self.p_gen_b = store.add(f"{p}.p_gen.b", (1,), "zeros")

    def init_state(self, final_state):
        h, c = final_state
        return (ad.tanh(ad.matmul(h, self.bridge_h) + self.bridge_hb),
                ad.matmul(c, self.bridge_c) + self.bridge_cb)

    def project_keys(self, H):
        if self.cross:
            return self.att_same.project_keys(H), self.att_cross.project_keys(H)
        return (self.att_all.project_keys(H),)

    def emit(self, h_dec, y_emb, H, masks, pad_mask, partner_states=None, window=None, keys_proj=None,
             p_role=None):
        """Everything after the LSTM cell for a block of steps (or one step).

        Returns a dict of Tensors: P_vocab, p_gen, att_final, ctx, and the
        interaction pieces (att_same, att_cross, p_role, role weights, r)."""
        out = {}
        if self.cross:
            res = cross_attention_dual(h_dec, H, masks, self.att_same, self.att_cross, self.role, keys_proj)
            p_role, att_final = combine_attention_gate(self.gate, h_dec, res.c_same, res.c_cross,
                                                       res.att_same, res.att_cross, p_role)
            ctx = p_role * res.c_same + (1.0 - p_role) * res.c_cross
            out.update(att_same=res.att_same, att_cross=res.att_cross, c_same=res.c_same,
                       c_cross=res.c_cross, p_role=p_role)
            contexts = [res.c_same, res.c_cross]
        else:
            att_final, ctx = self.att_all(h_dec, H, pad_mask, None if keys_proj is None else keys_proj[0])
            contexts = [ctx]
        r = None
        if self.self_interaction:
            ra = role_attention(self.role_attn, h_dec, partner_states, window)
            r = ra.r
            out.update(role_weights=ra.weights, r=r)
        out["P_vocab"] = fuse_and_project(self.head, h_dec, r, *contexts)
        out["p_gen"] = ad.sigmoid(ad.matmul(ad.concat([ctx, h_dec, y_emb], -1), self.p_gen_w) + self.p_gen_b)
        out["att_final"] = att_final
        out["ctx"] = ctx
        return out


class TransformerDecoderLayer:
    """Causal self-attention, then role-masked cross attentions plus a parallel
    role attention over the partner's self-attention outputs, then feed-forward."""

    def __init__(self, store, name, d_model, d_ff, heads, cross=True, self_interaction=True):
        self.cross = cross
        self.self_interaction = self_interaction
        self.sides = {}
        for role in ("user", "agent"):
            p = f"{name}.{role}"
            s = {"self": MultiHeadAttention(store, f"{p}.self", d_model, heads),
                 "ln1": LayerNorm(store, f"{p}.ln1", d_model),
                 "ln2": LayerNorm(store, f"{p}.ln2", d_model),
                 "ff": FeedForward(store, f"{p}.ff", d_model, d_ff),
                 "ln3": LayerNorm(store, f"{p}.ln3", d_model)}
            if cross:
                s["same"] = MultiHeadAttention(store, f"{p}.cross_same", d_model, heads)
                s["cross"] = MultiHeadAttention(store, f"{p}.cross_other", d_model, heads)
            else:
                s["all"] = MultiHeadAttention(store, f"{p}.cross", d_model, heads)
            if self_interaction:
                s["role"] = MultiHeadAttention(store, f"{p}.role", d_model, heads)
            self.sides[role] = s

    def self_block(self, role, x_q, x_kv, mask):
        s = self.sides[role]
        a, _ = s["self"](x_q, x_kv, mask)
        return s["ln1"](x_q + a)

    def mix_block(self, role, a, H, masks, pad_mask, partner_a=None, window=None):
        """Returns (output, att_same, att_cross); for the no-split variant att_cross is None."""
        s = self.sides[role]
        total = a
        if self.cross:
            o_same, att_same = s["same"](a, H, masks.of(role))
            o_cross, att_cross = s["cross"](a, H, masks.of(other_role(role)))
            total = total + o_same + o_cross
        else:
            o_all, att_same = s["all"](a, H, pad_mask)
            att_cross = None
            total = total + o_all
        if self.self_interaction:
            o_role, _ = s["role"](a, partner_a, window)
            total = total + o_role
        return s["ln2"](total), att_same, att_cross

    def ff_block(self, role, b):
        s = self.sides[role]
        return s["ln3"](b + s["ff"](b))


def causal_mask(T, S=None):
    S = T if S is None else S
    return (np.arange(S)[None, :] <= np.arange(T)[:, None]).astype(np.float64)


def transformer_decoder_layer(layer: TransformerDecoderLayer, x, H, masks, pad_mask, lengths):
    """Teacher-forced pass of one layer for both roles.

    ``x`` and ``lengths`` map role -> [B, T_role, d] inputs and [B] gold lengths.
    Returns (outputs by role, self-attention outputs by role, attention by role)."""
    a = {}
    for role, xr in x.items():
        T = xr.shape[1]
        a[role] = layer.self_block(role, xr, xr, np.broadcast_to(causal_mask(T), (xr.shape[0], T, T)))
    out, atts = {}, {}
    for role in x:
        partner = other_role(role)
        window = role_window(a[role].shape[1], a[partner].shape[1], lengths[partner])
        b, att_s, att_c = layer.mix_block(role, a[role], H, masks, pad_mask, a[partner], window)
        out[role] = layer.ff_block(role, b)
        atts[role] = (att_s, att_c)
    return out, a, atts
