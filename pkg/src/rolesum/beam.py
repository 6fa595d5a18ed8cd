"""Interactive dual-beam search, greedy decoding and n-gram blocking.

The two sides keep equally sized beams paired by index: at every step the
k-th hypothesis of one side attends over the state history of the k-th
hypothesis of the other.  Finished hypotheses stay in their slots and keep
competing with their final score; a side stops once all of its slots are
finished, while its states stay visible to the partner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS, PAD, ROLES

NEG_INF = -np.inf


@dataclass(frozen=True, eq=False)
class Hypothesis:
    tokens: tuple = ()
    logprob: float = 0.0
    history: tuple = ()     # one decoder record per token
    finished: bool = False
    coverage: np.ndarray | None = field(default=None, repr=False)
    atts: tuple = field(default=(), repr=False)

    def extend(self, token, logp, record, coverage=None, att=None):
        return Hypothesis(self.tokens + (int(token),), self.logprob + float(logp), self.history + (record,),
                          token == EOS, coverage, self.atts + (att,))

    @property
    def output(self):
        """Generated tokens without the closing EOS."""
        return list(self.tokens[:-1]) if self.finished else list(self.tokens)

    def score(self, length_norm=False):
        if length_norm and self.tokens:
            return self.logprob / len(self.tokens)
        return self.logprob


@dataclass
class PairedBeamState:
    user: list
    agent: list
    step: int = 0

    def side(self, role):
        return self.user if role == "user" else self.agent


@dataclass
class DecodeResult:
    user: Hypothesis
    agent: Hypothesis

    def side(self, role):
        return self.user if role == "user" else self.agent


def block_repeat_ngrams(tokens, n) -> set:
    """Tokens that would complete an n-gram already present in ``tokens``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = tuple(tokens)
    if len(tokens) < n - 1:
        return set()
    prefix = tokens[len(tokens) - (n - 1):] if n > 1 else ()
    return {tokens[i + n - 1] for i in range(len(tokens) - n + 1) if tokens[i: i + n - 1] == prefix}


def next_token_scores(hyp: Hypothesis, logp, min_len=0, ngram_block=None):
    """Step log-probabilities with decoding constraints applied as -inf (no renormalisation)."""
    logp = np.array(logp, dtype=np.float64)
    logp[PAD] = NEG_INF
    logp[BOS] = NEG_INF
    if len(hyp.tokens) < min_len:
        logp[EOS] = NEG_INF
    if ngram_block:
        for tok in block_repeat_ngrams(hyp.tokens, ngram_block):
            logp[tok] = NEG_INF
    return logp


def _advance(model, ctx, state: PairedBeamState, active):
    rows = {r: state.side(r) for r in ROLES}
    prev = {r: [h.tokens[-1] if h.tokens else BOS for h in rows[r]] for r in ROLES}
    hist = {r: [h.history for h in rows[r]] for r in ROLES}
    cov = {r: [h.coverage for h in rows[r]] for r in ROLES}
    return model.step(ctx, active, prev, hist, cov)


def interactive_beam_search(model, example, beam=5, min_len=0, max_len=100, ngram_block=None,
                            length_norm=False, on_step=None, ctx=None) -> DecodeResult:
    if beam < 1:
        raise ValueError("beam must be >= 1")
    ctx = ctx or model.prepare(example)
    state = PairedBeamState([Hypothesis()] * beam, [Hypothesis()] * beam)
    done = {r: False for r in ROLES}
    for t in range(max_len):
        # identical start hypotheses: expand only slot 0 on the first step
        active = {r: [not done[r] and not h.finished and (t > 0 or k == 0) for k, h in enumerate(state.side(r))]
                  for r in ROLES}
        res = _advance(model, ctx, state, active)
        new = {}
        for role in ROLES:
            hyps = state.side(role)
            if done[role]:
                new[role] = hyps
                continue
            cands = []
            for k, h in enumerate(hyps):
                if h.finished:
                    cands.append((h.logprob, h, None))
                    continue
                if not active[role][k]:
                    continue
                o = res[role][k]
                scores = next_token_scores(h, o.logp, min_len, ngram_block)
                for tok in np.argsort(-scores, kind="stable")[:beam]:
                    cands.append((h.logprob + scores[tok], h, (int(tok), scores[tok], o)))
            order = sorted(range(len(cands)), key=lambda i: -cands[i][0])[:beam]
            picked = []
            for i in order:
                _, h, ext = cands[i]
                if ext is None:
                    picked.append(h)
                else:
                    tok, lp, o = ext
                    picked.append(h.extend(tok, lp, o.record, o.coverage, o.att))
            while len(picked) < beam:
                picked.append(picked[0])
            new[role] = picked
            done[role] = all(h.finished for h in picked)
        state = PairedBeamState(new["user"], new["agent"], t + 1)
        if on_step:
            on_step(state)
        if all(done.values()):
            break
    return DecodeResult(*(_best(state.side(r), length_norm) for r in ROLES))


def _best(hyps, length_norm):
    pool = [h for h in hyps if h.finished] or list(hyps)
    best = pool[0]
    for h in pool[1:]:
        if h.score(length_norm) > best.score(length_norm):
            best = h
    return best


def greedy_decode(model, example, min_len=0, max_len=100, ngram_block=None, ctx=None) -> DecodeResult:
    """Both decoders pick argmax tokens in lockstep, each seeing the other's greedy history."""
    ctx = ctx or model.prepare(example)
    hyps = {r: Hypothesis() for r in ROLES}
    for _ in range(max_len):
        active = {r: [not hyps[r].finished] for r in ROLES}
        if not any(a[0] for a in active.values()):
            break
        state = PairedBeamState([hyps["user"]], [hyps["agent"]])
        res = _advance(model, ctx, state, active)
        for role in ROLES:
            if active[role][0]:
                o = res[role][0]
                scores = next_token_scores(hyps[role], o.logp, min_len, ngram_block)
                tok = int(np.argmax(scores))
                hyps[role] = hyps[role].extend(tok, scores[tok], o.record, o.coverage, o.att)
    return DecodeResult(hyps["user"], hyps["agent"])


DECODE_DEFAULTS = {"recurrent": {"min_len": 10, "max_len": 100, "ngram_block": None},
                   "transformer": {"min_len": 15, "max_len": 200, "ngram_block": 5}}
