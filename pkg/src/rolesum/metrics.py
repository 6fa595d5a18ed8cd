"""ROUGE-1/2/L, corpus BLEU-4, sub-summary matching, a paired t-test and
attention export."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ROLES

log = logging.getLogger(__name__)

PERIOD = "."
BLEU_VARIANT = "corpus BLEU-4, brevity penalty, add-one smoothing on zero-match orders"


def _prf(hits, n_cand, n_ref):
    p = hits / n_cand if n_cand else 0.0
    r = hits / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f}


def ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n=1):
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidate or not reference:
        log.warning("rouge_n: empty candidate or reference")
        return _prf(0, 0, 0)
    c, r = ngrams(candidate, n), ngrams(reference, n)
    hits = sum(min(k, r[g]) for g, k in c.items())
    return _prf(hits, sum(c.values()), sum(r.values()))


def lcs_table(a, b):
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, x in enumerate(a, 1):
        for j, y in enumerate(b, 1):
            dp[i, j] = dp[i - 1, j - 1] + 1 if x == y else max(dp[i - 1, j], dp[i, j - 1])
    return dp


def lcs_length(a, b) -> int:
    return int(lcs_table(a, b)[len(a), len(b)])


def lcs_positions(a, b) -> set:
    """Indices into ``a`` of one longest common subsequence with ``b``."""
    dp = lcs_table(a, b)
    i, j, hits = len(a), len(b), set()
    while i and j:
        if a[i - 1] == b[j - 1]:
            hits.add(i - 1)
            i, j = i - 1, j - 1
        elif dp[i - 1, j] >= dp[i, j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def split_sentences(tokens, period=PERIOD):
    out, cur = [], []
    for t in tokens:
        if t == period:
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        out.append(cur)
    return out


def rouge_l(candidate, reference, period=PERIOD):
    """Summary-level ROUGE-L: union LCS of each reference sentence against all
    candidate sentences, with per-token hit counts clipped to the counts
    available in both texts.  Period tokens only split sentences."""
    cand, ref = split_sentences(candidate, period), split_sentences(reference, period)
    n_cand, n_ref = sum(map(len, cand)), sum(map(len, ref))
    if not n_cand or not n_ref:
        return _prf(0, 0, 0)
    ref_left = Counter(t for s in ref for t in s)
    cand_left = Counter(t for s in cand for t in s)
    hits = 0
    for r in ref:
        union = set()
        for c in cand:
            union |= lcs_positions(r, c)
        for i in sorted(union):
            t = r[i]
            if ref_left[t] > 0 and cand_left[t] > 0:
                hits += 1
                ref_left[t] -= 1
                cand_left[t] -= 1
    return _prf(hits, n_cand, n_ref)


def bleu(candidates, references, max_n=4):
    """Corpus-level BLEU with brevity penalty ``exp(1 - r/c)`` for ``c <= r``.

    An order with zero clipped matches uses ``1 / (total + 1)``.  Returns a dict
    with ``bleu``, ``precisions``, ``bp`` and the lengths."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("bleu needs equally long, non-empty candidate and reference lists")
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for c, r in zip(candidates, references):
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_n + 1):
            cg, rg = ngrams(c, n), ngrams(r, n)
            matches[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    precisions = [m / t if m > 0 else 1.0 / (t + 1) for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n) if bp > 0 else 0.0
    return {"bleu": score, "precisions": precisions, "bp": bp, "cand_len": c_len, "ref_len": r_len}


def sub_summary_match(cand_sents, ref_sents, threshold=0.5):
    """Greedy one-to-one matching of sentences in descending ROUGE-L F1 order;
    pairs below ``threshold`` never match."""
    if not cand_sents or not ref_sents:
        return _prf(0, 0, 0) | {"matched": 0}
    pairs = []
    for i, c in enumerate(cand_sents):
        for j, r in enumerate(ref_sents):
            pairs.append((rouge_l(c, r)["f1"], i, j))
    pairs.sort(key=lambda x: -x[0])
    used_c, used_r, matched = set(), set(), 0
    for f, i, j in pairs:
        if f < threshold:
            break
        if i in used_c or j in used_r:
            continue
        used_c.add(i)
        used_r.add(j)
        matched += 1
    return _prf(matched, len(cand_sents), len(ref_sents)) | {"matched": matched}


# -- significance ------------------------------------------------------------------

def _betacf(a, b, x, max_iter=300, tol=1e-15):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1, a - 1
    c, d = 1.0, 1 - qab * x / qap
    d = 1 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1 + aa * d
        d = 1 / (d if abs(d) > tiny else tiny)
        c = 1 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1 + aa * d
        d = 1 / (d if abs(d) > tiny else tiny)
        c = 1 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1) < tol:
            break
    return h


def betainc(a, b, x):
    """Regularised incomplete beta ``I_x(a, b)`` by continued fraction."""
    if not 0 <= x <= 1:
        raise ValueError("x must lie in [0, 1]")
    if x in (0, 1):
        return float(x)
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1) / (a + b + 2):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1 - math.exp(ln_front) * _betacf(b, a, 1 - x) / b


def t_two_sided_p(t, df):
    return betainc(df / 2, 0.5, df / (df + t * t))


def paired_t_test(scores_a, scores_b):
    """Two-sided paired t-test; returns ``(t, p)``."""
    a, b = np.asarray(scores_a, dtype=np.float64), np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_t_test needs two equally long score lists of length >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        log.warning("paired_t_test: zero-variance differences")
        return (0.0, 1.0) if d.mean() == 0 else (math.copysign(math.inf, d.mean()), 0.0)
    t = d.mean() / (sd / math.sqrt(len(d)))
    return float(t), float(t_two_sided_p(t, len(d) - 1))


# -- reports -------------------------------------------------------------------------

METRICS = ("rouge1", "rouge2", "rougeL", "sub_p", "sub_r", "sub_f1")


def example_scores(hyp, ref, period=PERIOD, threshold=0.5):
    sub = sub_summary_match(split_sentences(hyp, period), split_sentences(ref, period), threshold)
    return {"rouge1": rouge_n(hyp, ref, 1)["f1"], "rouge2": rouge_n(hyp, ref, 2)["f1"],
            "rougeL": rouge_l(hyp, ref, period)["f1"],
            "sub_p": sub["precision"], "sub_r": sub["recall"], "sub_f1": sub["f1"]}


@dataclass
class MetricReport:
    ids: list
    per_example: dict                 # role -> list of metric dicts
    bleu: dict                        # role -> corpus BLEU
    significance: dict = field(default_factory=dict)  # role -> {metric: (t, p)}

    @property
    def count(self):
        return len(self.ids)

    def mean(self, role, metric):
        vals = [s[metric] for s in self.per_example[role]]
        return float(np.mean(vals)) if vals else 0.0

    def summary(self):
        return {role: {m: self.mean(role, m) for m in METRICS} | {"bleu": self.bleu[role]} for role in ROLES}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# bleu: {BLEU_VARIANT}\n")
            w = csv.writer(fh)
            w.writerow(["id", "role", *METRICS, "bleu"])
            for role in ROLES:
                for i, s in zip(self.ids, self.per_example[role]):
                    w.writerow([i, role, *(f"{s[m]:.6f}" for m in METRICS), ""])
            for role in ROLES:
                w.writerow(["MEAN", role, *(f"{self.mean(role, m):.6f}" for m in METRICS), f"{self.bleu[role]:.6f}"])

    def table(self):
        cols = [*METRICS, "bleu"]
        lines = [f"BLEU: {BLEU_VARIANT}; n={self.count}",
                 f"{'role':<6}" + "".join(f"{c:>9}" for c in cols)]
        for role, vals in self.summary().items():
            lines.append(f"{role:<6}" + "".join(f"{100 * vals[c]:>9.2f}" for c in cols))
        for role, tests in self.significance.items():
            for metric, (t, p) in tests.items():
                lines.append(f"{role} {metric} vs baseline: t={t:.3f} p={p:.4g}")
        return "\n".join(lines)

    def plot(self, path):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        cols = [*METRICS, "bleu"]
        s = self.summary()
        x = np.arange(len(cols))
        fig, ax = plt.subplots(figsize=(7, 3.2))
        for k, role in enumerate(ROLES):
            ax.bar(x + (k - 0.5) * 0.4, [100 * s[role][c] for c in cols], 0.4, label=role)
        ax.set_xticks(x, cols)
        ax.set_ylabel("score (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)


def evaluate(hyps: dict, refs: dict, period=PERIOD, threshold=0.5, baseline: dict | None = None) -> MetricReport:
    """``hyps``/``refs`` map id -> {role: tokens}.  Ids must align exactly."""
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise ValueError(f"hypothesis/reference ids differ: missing {missing[:20]}, unexpected {extra[:20]}")
    if not refs:
        raise ValueError("empty evaluation set")
    ids = sorted(refs)
    per, bl = {}, {}
    for role in ROLES:
        per[role] = [example_scores(hyps[i][role], refs[i][role], period, threshold) for i in ids]
        bl[role] = bleu([hyps[i][role] for i in ids], [refs[i][role] for i in ids])["bleu"]
    report = MetricReport(ids, per, bl)
    if baseline is not None:
        base = evaluate(baseline, refs, period, threshold)
        if len(ids) >= 2:
            for role in ROLES:
                report.significance[role] = {
                    m: paired_t_test([s[m] for s in per[role]], [s[m] for s in base.per_example[role]])
                    for m in ("rouge1", "rouge2", "rougeL")}
    return report


# -- attention export ---------------------------------------------------------------

def attention_rows(result, role):
    """Per-step attention vectors of one decoded side, by kind."""
    hyp = result.side(role)
    kinds = {}
    for att in hyp.atts:
        for kind, vec in (att or {}).items():
            if kind == "p_role":
                continue
            kinds.setdefault(kind, []).append(np.asarray(vec, dtype=np.float64))
    return {k: np.stack(v) for k, v in kinds.items()}


def export_attention(model, example, out_dir, min_len=0, max_len=100):
    """Greedy-decode ``example`` and write one CSV per decoder (kind, step, one
    column per input position, plus an Avg row per kind), a role-mask CSV and a
    heatmap figure.  Returns the written paths."""
    from .beam import greedy_decode

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = greedy_decode(model, example, min_len, max_len)
    ctx = model.prepare(example)
    n = ctx.pad_mask.shape[1]
    paths = []
    rows_by_role = {}
    for role in ROLES:
        rows = attention_rows(result, role)
        rows_by_role[role] = rows
        path = out_dir / f"{example.id}.{role}.attention.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "step", *range(n)])
            for kind, mat in rows.items():
                for t, vec in enumerate(mat, 1):
                    w.writerow([kind, t, *(f"{v:.8g}" for v in vec)])
                w.writerow([kind, "Avg", *(f"{v:.8g}" for v in mat.mean(axis=0))])
        paths.append(path)
    mpath = out_dir / f"{example.id}.masks.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", *range(n)])
        w.writerow(["token", *example.tokens])
        w.writerow(["user_mask", *ctx.user_mask[0].astype(int)])
        w.writerow(["agent_mask", *ctx.agent_mask[0].astype(int)])
    paths.append(mpath)
    paths.append(plot_attention(rows_by_role, example, out_dir / f"{example.id}.attention.png"))
    return paths


def plot_attention(rows_by_role, example, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [(role, kind, mat) for role, rows in rows_by_role.items() for kind, mat in rows.items()]
    fig, axes = plt.subplots(len(panels), 1, figsize=(max(6, len(example.tokens) * 0.12), 1.6 * len(panels) + 0.5),
                             squeeze=False)
    for ax, (role, kind, mat) in zip(axes[:, 0], panels):
        ax.imshow(mat, aspect="auto", cmap="viridis", interpolation="nearest")
        ax.set_ylabel(f"{role}\n{kind}", fontsize=7)
        ax.set_yticks([])
        ax.set_xticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
