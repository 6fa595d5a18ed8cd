"""Shared multi-seed training experiment used by the acceptance suite."""
from __future__ import annotations

import time

import numpy as np

from rolesum.beam import interactive_beam_search
from rolesum.corpus import build_vocabulary, decode_ids, encode_example, generate_synthetic_corpus
from rolesum.metrics import rouge_l
from rolesum.model import ModelConfig, build_model
from rolesum.training import Hyperparams, evaluate_loss, run_training

RUNS = {"both": ("both", None), "multi": ("none", None), "both_beta0": ("both", 0.0)}


def corpus(seed, n_train=2000, n_val=200, n_test=200):
    ds = generate_synthetic_corpus(n_train + n_val + n_test, seed=1000 + seed, integration_fraction=0.5)
    vocab = build_vocabulary(ds[:n_train])
    enc = [encode_example(d, vocab) for d in ds]
    return vocab, enc[:n_train], enc[n_train:n_train + n_val], enc[n_train + n_val:]


def train_and_score(name, seed, max_steps=1000, beam=5, max_len=40, log=print):
    """Train one configuration and score it on the test split.

    Returns ``(row, model, test examples)``; ``row`` holds the validation KL
    terms, validation NLL and mean test ROUGE-L F1 per role."""
    interaction, beta = RUNS[name]
    vocab, train, val, test = corpus(seed)
    model = build_model(ModelConfig(len(vocab), interaction=interaction, seed=seed))
    hp = Hyperparams(beta=beta, max_steps=max_steps, eval_every=max(max_steps // 5, 1), seed=seed)
    t0 = time.time()
    res = run_training(model, train, val, hp)
    model.store.load_state(res.best_state)
    val_losses = evaluate_loss(model, val, hp.resolved("recurrent"))
    scores = {"user": [], "agent": []}
    for ex in test:
        out = interactive_beam_search(model, ex, beam, min_len=0, max_len=max_len)
        for role in scores:
            hyp = decode_ids(out.side(role).output, vocab, ex.oovs)
            ref = decode_ids(ex.target(role), vocab, ex.oovs)
            scores[role].append(rouge_l(hyp, ref)["f1"])
    row = {"name": name, "seed": seed, "kl_user": val_losses["kl_user"], "kl_agent": val_losses["kl_agent"],
           "val_nll": val_losses["nll"], "rougeL_user": float(np.mean(scores["user"])),
           "rougeL_agent": float(np.mean(scores["agent"])), "seconds": time.time() - t0}
    log(row)
    return row, model, test
