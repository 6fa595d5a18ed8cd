"""Joint teacher-forced training: losses, optimizers, the two-phase loop and
binary checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Vocabulary, make_batch
from .interaction import attention_divergence_loss
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)

DEFAULT_BETA = {"recurrent": 0.5, "transformer": 0.25}
DEFAULT_LR = {"recurrent": 0.15, "transformer": 1e-3}


@dataclass
class Hyperparams:
    alpha: float = 0.5
    beta: float | None = None          # variant default when None
    coverage_weight: float = 1.0
    learning_rate: float | None = None  # variant default when None
    batch_size: int = 8
    max_steps: int = 1000
    phase1_fraction: float = 0.8
    eval_every: int = 50
    warmup_steps: int = 1000            # transformer only
    seed: int = 0
    per_token: bool = False
    detach_same: bool = False

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.coverage_weight < 0:
            raise ValueError("coverage_weight must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if not 0 <= self.phase1_fraction <= 1:
            raise ValueError("phase1_fraction must lie in [0, 1]")

    def resolved(self, variant: str) -> "Hyperparams":
        out = Hyperparams(**asdict(self))
        if out.beta is None:
            out.beta = DEFAULT_BETA[variant]
        if out.learning_rate is None:
            out.learning_rate = DEFAULT_LR[variant]
        return out


@dataclass
class LossBreakdown:
    nll_user: ad.Tensor
    nll_agent: ad.Tensor
    kl_user: ad.Tensor
    kl_agent: ad.Tensor
    coverage: ad.Tensor
    total: ad.Tensor
    nll: ad.Tensor | None = None
    tokens: int = 0

    def floats(self) -> dict:
        return {f.name: float(ad.as_tensor(getattr(self, f.name)).value)
                for f in fields(self) if f.name not in ("tokens",) and getattr(self, f.name) is not None}


def _role_sums(logp, mask, per_token):
    """Per-example summed (or token-averaged) negative log-likelihood, [B]."""
    mask = np.asarray(mask)
    s = -ad.sum_(ad.as_tensor(logp) * mask.astype(ad.as_tensor(logp).dtype), axis=-1)
    if per_token:
        s = s * (1.0 / np.maximum(mask.sum(axis=-1), 1)).astype(s.dtype)
    return s


def joint_nll_loss(logp_user, logp_agent, alpha, mask_user=None, mask_agent=None, per_token=False):
    """``mean_b -(alpha * sum_t log P(user gold) + (1 - alpha) * sum_t log P(agent gold))``.

    Log-probabilities are [B, T] with pad steps excluded by the masks (all steps
    count when a mask is omitted)."""
    lu, la = ad.as_tensor(logp_user), ad.as_tensor(logp_agent)
    mu = np.ones(lu.shape) if mask_user is None else mask_user
    ma = np.ones(la.shape) if mask_agent is None else mask_agent
    return ad.mean(_role_sums(lu, mu, per_token) * alpha + _role_sums(la, ma, per_token) * (1 - alpha))


def total_loss(nll, kl_user, kl_agent, coverage, beta, coverage_weight):
    """``nll + beta * (kl_user + kl_agent) + coverage_weight * coverage``."""
    return ad.as_tensor(nll) + (ad.as_tensor(kl_user) + kl_agent) * beta + ad.as_tensor(coverage) * coverage_weight


def _valid_rows(batch):
    return [b for b in range(batch.size) if batch.user_mask[b].any() and batch.agent_mask[b].any()]


def teacher_forced_forward(batch, model, hp: Hyperparams, phase: int = 2, vocab_size=None):
    """Loss components for one batch.  Phase 1 trains on NLL only (KL and
    coverage are still reported).  Role-empty rows are dropped with a warning;
    returns None if nothing remains."""
    keep = _valid_rows(batch)
    if len(keep) < batch.size:
        dropped = [batch.ids[b] for b in range(batch.size) if b not in keep]
        log.warning("skipping role-empty examples %s", dropped)
        if not keep:
            return None
        batch = make_batch([batch.examples[b] for b in keep], vocab_size or model.cfg.vocab_size)
    out = model.forward(batch)
    u, a = out["user"], out["agent"]
    dtype = model.dtype
    nll_user = ad.mean(_role_sums(u.logp_gold, u.step_mask, hp.per_token))
    nll_agent = ad.mean(_role_sums(a.logp_gold, a.step_mask, hp.per_token))
    nll = joint_nll_loss(u.logp_gold, a.logp_gold, hp.alpha, u.step_mask, a.step_mask, hp.per_token)
    zero = ad.Tensor(np.zeros((), dtype=dtype))
    if u.acc_cross is not None:
        kl_user = attention_divergence_loss(a.acc_cross, u.acc_same, hp.detach_same)
        kl_agent = attention_divergence_loss(u.acc_cross, a.acc_same, hp.detach_same)
    else:
        kl_user = kl_agent = zero
    coverage = zero
    if u.coverage is not None:
        coverage = ad.mean(_role_sums(-u.coverage, u.step_mask, hp.per_token)
                           + _role_sums(-a.coverage, a.step_mask, hp.per_token))
    beta = hp.beta if phase == 2 else 0.0
    cw = hp.coverage_weight if phase == 2 else 0.0
    total = total_loss(nll, kl_user, kl_agent, coverage, beta, cw)
    tokens = int(u.step_mask.sum() + a.step_mask.sum())
    return LossBreakdown(nll_user, nll_agent, kl_user, kl_agent, coverage, total, nll, tokens)


# -- optimizers -----------------------------------------------------------------

def _grads_finite(params):
    bad = [p.name for p in params if not np.isfinite(p.grad).all()]
    if bad:
        log.error("non-finite gradient in %s; step rejected", bad[:5])
        for p in params:
            p.zero_grad()
        return False
    return True


def adagrad_step(params, learning_rate=0.15, eps=1e-10) -> bool:
    """``acc += g^2; w -= lr * g / sqrt(acc + eps)``; grads are zeroed.  Returns False if rejected."""
    params = list(params)
    if not _grads_finite(params):
        return False
    for p in params:
        g = p.grad
        p.accumulator += g * g
        p.value -= (learning_rate * g / np.sqrt(p.accumulator + eps)).astype(p.value.dtype)
        p.zero_grad()
    return True


def adam_step(params, learning_rate, step, warmup_steps=1000, b1=0.9, b2=0.999, eps=1e-8) -> bool:
    """Adam with a linear warmup to ``learning_rate`` over ``warmup_steps``; ``step`` counts from 1."""
    params = list(params)
    if not _grads_finite(params):
        return False
    lr = learning_rate * min(1.0, step / max(warmup_steps, 1))
    for p in params:
        g = p.grad
        p.moment = b1 * p.moment + (1 - b1) * g
        p.accumulator = b2 * p.accumulator + (1 - b2) * g * g
        m_hat = p.moment / (1 - b1 ** step)
        v_hat = p.accumulator / (1 - b2 ** step)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()
    return True


class Optimizer:
    def __init__(self, variant, hp: Hyperparams):
        self.variant = variant
        self.hp = hp
        self.t = 0

    def step(self, params) -> bool:
        self.t += 1
        if self.variant == "transformer":
            return adam_step(params, self.hp.learning_rate, self.t, self.hp.warmup_steps)
        return adagrad_step(params, self.hp.learning_rate)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"RSUMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: list[str]
    state: dict
    step: int = 0
    val_loss: float = float("nan")
    manifest: list = field(default_factory=list)

    @property
    def fingerprint(self):
        return self.config.fingerprint()


def save_checkpoint(path, model, vocab, step=0, val_loss=float("nan")):
    manifest, offset, chunks = [], 0, []
    for p in model.params:
        data = np.ascontiguousarray(p.value).astype(p.value.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": p.name, "shape": list(p.shape), "dtype": p.value.dtype.name,
                         "offset": offset, "nbytes": len(data)})
        offset += len(data)
        chunks.append(data)
    header = {"fingerprint": model.cfg.fingerprint(), "step": int(step),
              "val_loss": None if val_loss is None or math.isnan(val_loss) else float(val_loss),
              "config": asdict(model.cfg), "vocab": list(vocab.itos if isinstance(vocab, Vocabulary) else vocab),
              "manifest": manifest}
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    pre = len(MAGIC) + 12
    if len(raw) < pre or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC): pre])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < pre + hlen:
        raise CheckpointError(f"{path}: truncated header: expected {pre + hlen} bytes, found {len(raw)}")
    header = json.loads(raw[pre: pre + hlen])
    cfg = ModelConfig(**header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint {header['fingerprint']} does not match "
                              f"its config ({cfg.fingerprint()})")
    if expected_fingerprint is not None and expected_fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint {header['fingerprint']} != expected {expected_fingerprint}")
    manifest = header["manifest"]
    offset = 0
    for m in manifest:
        if m["offset"] != offset:
            raise CheckpointError(f"{path}: manifest entry {m['name']} at offset {m['offset']}, expected {offset}")
        offset += m["nbytes"]
    payload = raw[pre + hlen:]
    if len(payload) != offset:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest expects {offset} "
                              f"(file {len(raw)} bytes, expected {pre + hlen + offset})")
    state = {}
    for m in manifest:
        dt = np.dtype(m["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(m["shape"], dtype=np.int64)), offset=m["offset"])
        state[m["name"]] = arr.reshape(m["shape"]).astype(np.dtype(m["dtype"]))
    return Checkpoint(cfg, header["vocab"], state, header["step"],
                      float("nan") if header["val_loss"] is None else header["val_loss"], manifest)


def load_model(path, expected_fingerprint=None):
    """Rebuild a model from a checkpoint; returns (model, vocabulary, checkpoint)."""
    ck = load_checkpoint(path, expected_fingerprint)
    model = build_model(ck.config)
    model.store.load_state(ck.state)
    vocab = Vocabulary(ck.vocab[6:])
    if vocab.itos != ck.vocab:
        raise CheckpointError(f"{path}: vocabulary does not start with the reserved tokens")
    return model, vocab, ck


# -- training loop ---------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, msg, step, best_state=None):
        super().__init__(msg)
        self.step = step
        self.best_state = best_state


@dataclass
class TrainResult:
    best_state: dict
    best_val: float
    best_step: int
    history: list
    steps: int


def evaluate_loss(model, examples, hp: Hyperparams, phase=2):
    """Example-weighted mean of the loss components over ``examples`` (no tape)."""
    totals, n = {}, 0
    for start in range(0, len(examples), hp.batch_size):
        chunk = examples[start: start + hp.batch_size]
        lb = teacher_forced_forward(make_batch(chunk, model.cfg.vocab_size), model, hp, phase)
        if lb is None:
            continue
        for k, v in lb.floats().items():
            totals[k] = totals.get(k, 0.0) + v * len(chunk)
        n += len(chunk)
    return {k: v / max(n, 1) for k, v in totals.items()}


def _batches(examples, hp, vocab_size, rng):
    while True:
        order = rng.permutation(len(examples))
        for start in range(0, len(order), hp.batch_size):
            yield make_batch([examples[i] for i in order[start: start + hp.batch_size]], vocab_size)


def run_training(model, train, val, hp: Hyperparams, out_dir=None, vocab=None, on_step=None) -> TrainResult:
    """Two-phase schedule: the first ``phase1_fraction`` of steps optimise NLL
    only, the rest add the divergence and coverage terms.  Validation NLL picks
    the best parameters among the second-phase evaluations (the first phase
    only counts when the second is empty); when ``out_dir`` is given the best checkpoint, a
    metrics CSV and a training-curve figure are written there."""
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    hp = hp.resolved(model.cfg.variant)
    rng = np.random.default_rng(hp.seed)
    opt = Optimizer(model.cfg.variant, hp)
    phase1_steps = int(round(hp.max_steps * hp.phase1_fraction))
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    history, best_val, best_step, best_state = [], float("inf"), 0, model.store.state()
    batches = _batches(train, hp, model.cfg.vocab_size, rng)

    def validate(step):
        nonlocal best_val, best_step, best_state
        v = evaluate_loss(model, val, hp)
        val_loss = v["nll"]
        if step > phase1_steps and best_step <= phase1_steps:
            # the retained checkpoint comes from the final phase whenever it has steps
            best_val = float("inf")
        if val_loss < best_val:
            best_val, best_step, best_state = val_loss, step, model.store.state()
            if out_dir:
                save_checkpoint(out_dir / "best.ckpt", model, vocab or [], step, val_loss)
        return v

    for step in range(1, hp.max_steps + 1):
        phase = 1 if step <= phase1_steps else 2
        with ad.Tape() as tape:
            lb = teacher_forced_forward(next(batches), model, hp, phase)
            if lb is None:
                continue
            if not np.isfinite(lb.total.value):
                _write_history(out_dir, history)
                raise TrainingDiverged(f"non-finite loss at step {step}", step, best_state)
            tape.backward(lb.total)
        opt.step(model.params)
        row = {"step": step, "phase": phase, **lb.floats()}
        if step % hp.eval_every == 0 or step == hp.max_steps:
            row["val_loss"] = validate(step)["nll"]
        history.append(row)
        if on_step:
            on_step(row)
    if not history or "val_loss" not in history[-1]:
        validate(hp.max_steps)
    _write_history(out_dir, history)
    return TrainResult(best_state, best_val, best_step, history, hp.max_steps)


CSV_FIELDS = ("step", "phase", "nll_user", "nll_agent", "nll", "kl_user", "kl_agent", "coverage", "total", "val_loss")


def _write_history(out_dir, history):
    if not out_dir:
        return
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)
    if history:
        plot_training_curve(history, out_dir / "training_curve.png")


def plot_training_curve(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in history]
    ax.plot(steps, [r["total"] for r in history], lw=0.8, label="train total")
    ax.plot(steps, [r["nll"] for r in history], lw=0.8, label="train nll")
    val = [(r["step"], r["val_loss"]) for r in history if "val_loss" in r]
    if val:
        ax.plot(*zip(*val), "o-", ms=3, label="val nll")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- gradient check on a tiny model --------------------------------------------------

def tiny_model_gradient_check(variant="recurrent", interaction="both", seed=0, max_entries=6, eps=1e-5,
                              dtype="longdouble", layer_count=2):
    """Finite-difference check of the full training loss on a model with
    vocabulary 50, embedding 8 and hidden 12 over two short examples.

    Extended precision is the default: at initialisation some attention
    gradients are ~1e-8 against a loss of ~50, below what float64 central
    differences resolve.  Returns ``{parameter name: max relative error}``."""
    from .corpus import build_vocabulary, encode_example, generate_synthetic_corpus

    dialogues = generate_synthetic_corpus(2, seed=seed)
    vocab = build_vocabulary(dialogues, cap=44)
    examples = [encode_example(d, vocab, max_input=40, max_output=10) for d in dialogues]
    cfg = ModelConfig(len(vocab), variant=variant, interaction=interaction, embedding_dim=8, hidden_dim=12,
                      layer_count=layer_count, heads=2, max_positions=64, dtype=dtype, seed=seed)
    model = build_model(cfg)
    batch = make_batch(examples, len(vocab))
    hp = Hyperparams(beta=0.5, coverage_weight=1.0)

    def loss():
        return teacher_forced_forward(batch, model, hp, phase=2).total

    return ad.check_gradients(loss, model.params, eps=eps, max_entries=max_entries, seed=seed)
