"""Plain-text ``key = value`` run configuration with documented defaults."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields

from .model import ModelConfig
from .training import Hyperparams

log = logging.getLogger(__name__)

AUTO = None  # "auto" in the file: resolved per variant


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    variant: str = "recurrent"
    interaction: str = "both"
    embedding_dim: int = 32
    hidden_dim: int = 64
    layer_count: int = 2
    heads: int = 2
    max_positions: int = 512
    share_role_attention: bool = False
    dtype: str = "float32"
    # training
    alpha: float = 0.5
    beta: float | None = AUTO
    coverage_weight: float = 1.0
    learning_rate: float | None = AUTO
    batch_size: int = 8
    max_steps: int = 1000
    phase1_fraction: float = 0.8
    eval_every: int = 50
    warmup_steps: int = 1000
    seed: int = 0
    per_token: bool = False
    detach_same: bool = False
    # data
    vocab_cap: int = 10000
    max_input: int = 500
    max_output: int = 100
    # decoding
    beam: int = 5
    min_len: int | None = AUTO
    max_len: int | None = AUTO
    ngram_block: int | None = AUTO
    length_norm: bool = False
    # evaluation
    period: str = "."
    match_threshold: float = 0.5
    # gradient check
    gradcheck_threshold: float = 1e-3
    gradcheck_entries: int = 6

    def model_config(self, vocab_size) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        return ModelConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in keys})

    def hyperparams(self) -> Hyperparams:
        keys = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: getattr(self, k) for k in keys})

    def decode_options(self):
        from .beam import DECODE_DEFAULTS

        d = DECODE_DEFAULTS[self.variant]
        return {"min_len": d["min_len"] if self.min_len is None else self.min_len,
                "max_len": d["max_len"] if self.max_len is None else self.max_len,
                "ngram_block": d["ngram_block"] if self.ngram_block is None else (self.ngram_block or None)}


DOCS = {
    "variant": "recurrent (pointer-generator) or transformer",
    "interaction": "none | cross | self | both",
    "embedding_dim": "token embedding size (transformer model width)",
    "hidden_dim": "LSTM hidden size (transformer feed-forward size)",
    "layer_count": "transformer encoder and decoder layers",
    "heads": "transformer attention heads",
    "max_positions": "transformer positional table size",
    "share_role_attention": "one role-attention module for both decoders",
    "dtype": "float32 or float64",
    "alpha": "weight of the user NLL; the agent gets 1 - alpha",
    "beta": "attention divergence weight; auto = 0.5 recurrent, 0.25 transformer",
    "coverage_weight": "coverage loss weight (recurrent)",
    "learning_rate": "auto = 0.15 Adagrad (recurrent), 1e-3 Adam (transformer)",
    "batch_size": "examples per step",
    "max_steps": "optimizer steps",
    "phase1_fraction": "share of steps trained on NLL only",
    "eval_every": "validation interval in steps",
    "warmup_steps": "Adam warmup steps (transformer)",
    "seed": "global seed; RIS_SEED overrides",
    "per_token": "average NLL per token instead of summing",
    "detach_same": "stop gradients through the same-role side of the divergence",
    "vocab_cap": "vocabulary size excluding reserved tokens",
    "max_input": "dialogue truncation length",
    "max_output": "summary truncation length including EOS",
    "beam": "beam size",
    "min_len": "minimum summary length; auto = 10 recurrent, 15 transformer",
    "max_len": "maximum summary length; auto = 100 recurrent, 200 transformer",
    "ngram_block": "no-repeat n-gram size, 0 disables; auto = off recurrent, 5 transformer",
    "length_norm": "rank finished hypotheses by mean token log-probability",
    "period": "sentence delimiter token for ROUGE-L and sub-summary matching",
    "match_threshold": "ROUGE-L F1 needed for a sub-summary match",
    "gradcheck_threshold": "largest accepted relative gradient error",
    "gradcheck_entries": "coordinates perturbed per parameter tensor",
}

_TRUE, _FALSE = {"true", "yes", "1", "on"}, {"false", "no", "0", "off"}


def _field_type(f):
    t = str(f.type)
    for name, cast in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if t.startswith(name):
            return cast, "None" in t
    raise TypeError(t)


def _cast(key, raw, f):
    cast, optional = _field_type(f)
    if optional and raw.lower() == "auto":
        return None
    if cast is bool:
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return cast(raw)


def parse_config(text: str, source="<config>") -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    values, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        try:
            values[key] = _cast(key, raw, known[key])
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
        seen[key] = lineno
    for key in known:
        if key not in values:
            log.info("config: %s not set, using default %r", key, getattr(RunConfig, key))
    try:
        cfg = RunConfig(**values)
        cfg.model_config(1)
        cfg.hyperparams()
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return apply_env(cfg)


def load_config(path=None) -> RunConfig:
    if path is None:
        return apply_env(RunConfig())
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def apply_env(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get("RIS_SEED")
    if raw not in (None, ""):
        try:
            cfg.seed = int(raw)
        except ValueError:
            raise ConfigError(f"RIS_SEED must be an integer, got {raw!r}") from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        v = "auto" if v is None else str(v).lower() if isinstance(v, bool) else v
        lines.append(f"{f.name} = {v}  # {DOCS[f.name]}")
    return "\n".join(lines)
