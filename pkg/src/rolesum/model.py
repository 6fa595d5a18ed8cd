"""Encoder plus two interacting role decoders, in recurrent (pointer-generator)
and transformer variants.

``forward`` runs a teacher-forced batch and returns per-role gold
log-probabilities, coverage losses and attention accumulators.  ``prepare`` /
``step`` drive lockstep decoding of index-paired hypotheses for beam search.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, ROLES, UNK, EncodedExample, RoleMasks, make_batch
from .decoder import (RecurrentRoleDecoder, TransformerDecoderLayer, coverage_teacher_forced, gold_probability,
                      pointer_final_distribution, transformer_decoder_layer)
from .encoder import BiLSTMEncoder, TransformerEncoder, split_contexts
from .interaction import AdditiveAttention, AttnAccumulator, other_role, role_window
from .params import ParamStore

VARIANTS = ("recurrent", "transformer")
INTERACTIONS = ("none", "cross", "self", "both")


@dataclass
class ModelConfig:
    vocab_size: int
    variant: str = "recurrent"
    interaction: str = "both"
    embedding_dim: int = 32
    hidden_dim: int = 64
    layer_count: int = 2
    heads: int = 2
    max_positions: int = 512
    share_role_attention: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}, got {self.interaction!r}")
        for k in ("vocab_size", "embedding_dim", "hidden_dim", "heads", "max_positions"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.layer_count < 0:
            raise ValueError("layer_count must be >= 0")

    @property
    def cross(self):
        return self.interaction in ("cross", "both")

    @property
    def self_interaction(self):
        return self.interaction in ("self", "both")

    def fingerprint(self) -> str:
        arch = {k: v for k, v in asdict(self).items() if k not in ("dtype", "seed")}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SideOutput:
    logp_gold: Tensor              # [B, T]
    step_mask: np.ndarray          # [B, T]
    coverage: Tensor | None        # [B, T] per-step coverage loss
    acc_same: AttnAccumulator
    acc_cross: AttnAccumulator | None
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RecurrentRecord:
    h: np.ndarray
    c: np.ndarray

    def partner_state(self, layer=None):
        return self.h


@dataclass(frozen=True)
class TransformerRecord:
    layers: tuple   # per layer (layer input, self-attention output)

    def partner_state(self, layer):
        return self.layers[layer][1]


@dataclass
class DecodeContext:
    example: EncodedExample
    H: np.ndarray
    user_mask: np.ndarray
    agent_mask: np.ndarray
    pad_mask: np.ndarray
    ext_ids: np.ndarray
    ext_size: int
    init: dict = field(default_factory=dict)
    keys_proj: dict = field(default_factory=dict)

    def masks(self, k):
        return RoleMasks(np.repeat(self.user_mask, k, 0), np.repeat(self.agent_mask, k, 0))

    def rows(self, arr, k):
        return np.repeat(arr, k, axis=0)


@dataclass
class StepOut:
    logp: np.ndarray
    record: object
    coverage: np.ndarray | None
    att: dict


def build_model(cfg: ModelConfig):
    return (RecurrentModel if cfg.variant == "recurrent" else TransformerModel)(cfg)


class RoleSumModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore(cfg.seed, np.dtype(cfg.dtype))
        self.embedding = self.store.add("embedding", (cfg.vocab_size, cfg.embedding_dim), "normal", 0.1)

    @property
    def params(self):
        return list(self.store)

    @property
    def dtype(self):
        return self.store.dtype

    def to(self, dtype):
        self.store.astype(dtype)
        self.cfg.dtype = np.dtype(dtype).name
        return self

    def embed(self, ids):
        ids = np.asarray(ids)
        return ad.embed(self.embedding, np.where(ids < self.cfg.vocab_size, ids, UNK))

    def _check_roles(self, batch):
        split_contexts(None, RoleMasks(batch.user_mask, batch.agent_mask))

    def _context(self, example: EncodedExample, H):
        b = make_batch([example], self.cfg.vocab_size)
        ext_size = self.cfg.vocab_size + (len(example.oovs) if self.cfg.variant == "recurrent" else 0)
        return DecodeContext(example, H, b.user_mask, b.agent_mask, b.pad_mask, b.ext_ids, ext_size)

    def prepare(self, example: EncodedExample) -> DecodeContext:
        raise NotImplementedError

    def step(self, ctx, active, prev, hist, cov):
        raise NotImplementedError


def _pad_partner(seqs, layer=None):
    """Stack per-row partner histories into [K, S, d] plus a [K, S] availability mask."""
    S = max(len(s) for s in seqs)
    d = seqs[0][0].partner_state(layer).shape[-1]
    out = np.zeros((len(seqs), S, d), dtype=seqs[0][0].partner_state(layer).dtype)
    mask = np.zeros((len(seqs), S))
    for i, s in enumerate(seqs):
        for j, rec in enumerate(s):
            out[i, j] = rec.partner_state(layer)
        mask[i, : len(s)] = 1
    return out, mask


class RecurrentModel(RoleSumModel):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        h, E = cfg.hidden_dim, cfg.embedding_dim
        self.encoder = BiLSTMEncoder(self.store, E, h)
        shared = None
        if cfg.self_interaction and cfg.share_role_attention:
            shared = AdditiveAttention(self.store, "dec.role_att", h, h, h)
        self.decoders = {role: RecurrentRoleDecoder(self.store, role, self.encoder.out_dim, E, h, cfg.vocab_size,
                                                    cfg.cross, cfg.self_interaction, shared)
                         for role in ROLES}

    def encode(self, input_ids, pad_mask):
        return self.encoder(self.embed(input_ids), pad_mask)

    def forward(self, batch, p_role=None) -> dict[str, SideOutput]:
        self._check_roles(batch)
        masks = RoleMasks(batch.user_mask, batch.agent_mask)
        enc = self.encode(batch.input_ids, batch.pad_mask)
        hd, emb_in = {}, {}
        for role in ROLES:
            dec = self.decoders[role]
            tin = batch.targets[role][0]
            emb_in[role] = self.embed(tin)
            hd[role], _ = dec.lstm.run(emb_in[role], dec.init_state(enc.final_state))
        out = {}
        for role in ROLES:
            partner = other_role(role)
            tout, tmask = batch.targets[role][1], batch.targets[role][2]
            window = None
            if self.cfg.self_interaction:
                window = role_window(tout.shape[1], hd[partner].shape[1], batch.lengths(partner))
            o = self.decoders[role].emit(hd[role], emb_in[role], enc.H, masks, batch.pad_mask,
                                         hd[partner], window, p_role=p_role)
            p_gold = gold_probability(o["P_vocab"], o["p_gen"], o["att_final"], batch.ext_ids, tout)
            acc_same = AttnAccumulator()
            acc_cross = None
            if self.cfg.cross:
                acc_same.push(o["att_same"], tmask)
                acc_cross = AttnAccumulator()
                acc_cross.push(o["att_cross"], tmask)
            else:
                acc_same.push(o["att_final"], tmask)
            out[role] = SideOutput(ad.log(p_gold), tmask, coverage_teacher_forced(o["att_final"]),
                                   acc_same, acc_cross, o)
        return out

    def prepare(self, example):
        b = make_batch([example], self.cfg.vocab_size)
        self._check_roles(b)
        enc = self.encode(b.input_ids, b.pad_mask)
        ctx = self._context(example, enc.H.value)
        for role, dec in self.decoders.items():
            h0, c0 = dec.init_state(enc.final_state)
            ctx.init[role] = (h0.value, c0.value)
            ctx.keys_proj[role] = tuple(k.value for k in dec.project_keys(enc.H))
        return ctx

    def step(self, ctx, active, prev, hist, cov):
        """Advance every active row of both roles by one step.

        ``active``, ``prev``, ``hist`` and ``cov`` map role -> per-row lists; the
        rows are index-paired across roles.  Returns role -> list of StepOut
        (None for inactive rows)."""
        K = len(prev["user"])
        rows = {r: [k for k in range(K) if active[r][k]] for r in ROLES}
        new = {r: {} for r in ROLES}
        emb = {}
        for role, A in rows.items():
            if not A:
                continue
            dec = self.decoders[role]
            emb[role] = self.embed([prev[role][k] for k in A])
            if hist[role][A[0]]:
                h = np.stack([hist[role][k][-1].h for k in A])
                c = np.stack([hist[role][k][-1].c for k in A])
            else:
                h, c = (np.repeat(s, len(A), 0) for s in ctx.init[role])
            h, c = dec.lstm.cell(emb[role], (Tensor(h), Tensor(c)))
            for i, k in enumerate(A):
                new[role][k] = RecurrentRecord(h.value[i], c.value[i])
        result = {r: [None] * K for r in ROLES}
        for role, A in rows.items():
            if not A:
                continue
            partner = other_role(role)
            dec = self.decoders[role]
            n = len(A)
            h_dec = np.stack([new[role][k].h for k in A])
            partner_states, window = None, None
            if self.cfg.self_interaction:
                seqs = [tuple(hist[partner][k]) + ((new[partner][k],) if k in new[partner] else ()) for k in A]
                partner_states, window = _pad_partner(seqs)
            kp = tuple(Tensor(ctx.rows(x, n)) for x in ctx.keys_proj[role])
            o = dec.emit(Tensor(h_dec), emb[role], Tensor(ctx.rows(ctx.H, n)), ctx.masks(n), ctx.rows(ctx.pad_mask, n),
                         partner_states, window, kp)
            final = pointer_final_distribution(o["P_vocab"], o["p_gen"], o["att_final"], ctx.rows(ctx.ext_ids, n),
                                               ctx.ext_size)
            logp = np.log(np.maximum(final.value, ad.EPS))
            att_final = o["att_final"].value
            for i, k in enumerate(A):
                c_old = cov[role][k]
                att = {"final": att_final[i]}
                if self.cfg.cross:
                    att.update(same=o["att_same"].value[i], cross=o["att_cross"].value[i],
                               p_role=float(o["p_role"].value[i, 0]))
                result[role][k] = StepOut(logp[i], new[role][k],
                                          att_final[i] if c_old is None else c_old + att_final[i], att)
        return result


class TransformerModel(RoleSumModel):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        d, ff = cfg.embedding_dim, cfg.hidden_dim
        self.encoder = TransformerEncoder(self.store, d, ff, cfg.heads, cfg.layer_count, cfg.max_positions)
        self.dec_pos = self.store.add("dec.pos", (cfg.max_positions, d), "normal", 0.1)
        self.layers = [TransformerDecoderLayer(self.store, f"dec.layer{i}", d, ff, cfg.heads, cfg.cross,
                                               cfg.self_interaction) for i in range(cfg.layer_count)]
        self.out = {role: (self.store.add(f"dec.{role}.out.W", (d, cfg.vocab_size)),
                           self.store.add(f"dec.{role}.out.b", (cfg.vocab_size,), "zeros")) for role in ROLES}

    def encode(self, input_ids, pad_mask):
        return self.encoder(self.embed(input_ids), pad_mask)

    def _positions(self, start, stop):
        if stop > self.cfg.max_positions:
            raise ValueError(f"target length {stop} exceeds positional table size {self.cfg.max_positions}")
        return ad.getitem(ad.as_tensor(self.dec_pos), slice(start, stop))

    def _project(self, role, x):
        W, b = self.out[role]
        return ad.softmax(ad.matmul(x, W) + b)

    def forward(self, batch, p_role=None) -> dict[str, SideOutput]:
        self._check_roles(batch)
        masks = RoleMasks(batch.user_mask, batch.agent_mask)
        enc = self.encode(batch.input_ids, batch.pad_mask)
        x = {}
        for role in ROLES:
            tin = batch.targets[role][0]
            x[role] = self.embed(tin) + self._positions(0, tin.shape[1])
        lengths = {role: batch.lengths(role) for role in ROLES}
        per_layer = {role: [] for role in ROLES}
        for layer in self.layers:
            x, _, atts = transformer_decoder_layer(layer, x, enc.H, masks, batch.pad_mask, lengths)
            for role in ROLES:
                per_layer[role].append(atts[role])
        out = {}
        for role in ROLES:
            tout, tmask = batch.targets[role][1], batch.targets[role][2]
            P = self._project(role, x[role])
            gold = np.where(tout < self.cfg.vocab_size, tout, UNK)
            acc_same, acc_cross = AttnAccumulator(), None
            extras = {"P_vocab": P}
            if per_layer[role]:
                extras["att_same"] = _layer_mean([a[0] for a in per_layer[role]])
                acc_same.push(extras["att_same"], tmask)
                if self.cfg.cross:
                    extras["att_cross"] = _layer_mean([a[1] for a in per_layer[role]])
                    acc_cross = AttnAccumulator()
                    acc_cross.push(extras["att_cross"], tmask)
            out[role] = SideOutput(ad.log(ad.pick(P, gold)), tmask, None, acc_same, acc_cross, extras)
        return out

    def prepare(self, example):
        b = make_batch([example], self.cfg.vocab_size)
        self._check_roles(b)
        enc = self.encode(b.input_ids, b.pad_mask)
        return self._context(example, enc.H.value)

    def step(self, ctx, active, prev, hist, cov):
        K = len(prev["user"])
        rows = {r: [k for k in range(K) if active[r][k]] for r in ROLES}
        x, recs = {}, {r: {k: [] for k in rows[r]} for r in ROLES}
        t = None
        for role, A in rows.items():
            if A:
                t = len(hist[role][A[0]])
                x[role] = ad.reshape(self.embed([prev[role][k] for k in A]), (len(A), 1, -1)) + \
                    ad.reshape(self._positions(t, t + 1), (1, 1, -1))
        atts = {r: [] for r in ROLES}
        for li, layer in enumerate(self.layers):
            a = {}
            for role, A in rows.items():
                if not A:
                    continue
                past = [[rec.layers[li][0] for rec in hist[role][k]] for k in A]
                kv = x[role]
                if t:
                    kv = ad.concat([Tensor(np.asarray(past, dtype=self.dtype)), x[role]], 1)
                a[role] = layer.self_block(role, x[role], kv, np.ones((len(A), 1, t + 1)))
                for i, k in enumerate(A):
                    recs[role][k].append([x[role].value[i, 0], a[role].value[i, 0]])
            nxt = {}
            for role, A in rows.items():
                if not A:
                    continue
                partner = other_role(role)
                n = len(A)
                partner_a, window = None, None
                if self.cfg.self_interaction:
                    seqs = []
                    for k in A:
                        s = [rec.layers[li][1] for rec in hist[partner][k]]
                        if k in recs[partner]:
                            s.append(recs[partner][k][li][1])
                        seqs.append(s)
                    S = max(len(s) for s in seqs)
                    partner_a = np.zeros((n, S, self.cfg.embedding_dim), dtype=self.dtype)
                    window = np.zeros((n, 1, S))
                    for i, s in enumerate(seqs):
                        partner_a[i, : len(s)] = s
                        window[i, 0, : len(s)] = 1
                b, att_s, att_c = layer.mix_block(role, a[role], Tensor(ctx.rows(ctx.H, n)), ctx.masks(n),
                                                  ctx.rows(ctx.pad_mask, n), partner_a, window)
                atts[role].append((att_s, att_c))
                nxt[role] = layer.ff_block(role, b)
            x = nxt
        result = {r: [None] * K for r in ROLES}
        for role, A in rows.items():
            if not A:
                continue
            P = self._project(role, x[role]).value[:, 0]
            logp = np.log(np.maximum(P, ad.EPS))
            for i, k in enumerate(A):
                att = {}
                if atts[role]:
                    same = np.mean([s.value[i, 0] for s, _ in atts[role]], axis=0)
                    if self.cfg.cross:
                        att["same"] = same
                        att["cross"] = np.mean([c.value[i, 0] for _, c in atts[role]], axis=0)
                    else:
                        att["final"] = same
                rec = TransformerRecord(tuple((xl, sl) for xl, sl in recs[role][k]))
                result[role][k] = StepOut(logp[i], rec, None, att)
        return result


def _layer_mean(atts):
    total = atts[0]
    for a in atts[1:]:
        total = total + a
    return total * (1.0 / len(atts))




def decoder_step(model, ctx, role, y_prev, history, partner_history, coverage=None) -> StepOut:
    """Advance one side by one step against a fixed partner history.

    ``partner_history`` must hold at least one record when the model uses role
    attention (both sides start together, so the partner always has one)."""
    partner = other_role(role)
    return model.step(ctx, {role: [True], partner: [False]}, {role: [y_prev], partner: [EOS]},
                      {role: [tuple(history)], partner: [tuple(partner_history)]},
                      {role: [coverage], partner: [None]})[role][0]
