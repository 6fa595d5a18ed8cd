"""Command line: synth, train, decode, eval, gradcheck and attn-dump.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, format_config, load_config

log = logging.getLogger("rolesum")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _section(name, lines):
    print(f"=== {name} ===")
    for line in lines:
        print(line)
    print(f"=== end {name} ===")


def cmd_synth(args, cfg):
    from .corpus import generate_synthetic_corpus, save_corpus, split_corpus

    if args.n < 1:
        raise ValueError("--n must be >= 1")
    seed = args.seed if args.seed is not None else cfg.seed
    dialogues = generate_synthetic_corpus(args.n, seed, args.integration_fraction)
    splits = split_corpus(dialogues)
    out = Path(args.out)
    for name, items in splits.items():
        save_corpus(items, out / f"{name}.jsonl")
    _section("synth", [f"{name}\t{len(items)}" for name, items in splits.items()])


def _encode_all(dialogues, vocab, cfg):
    from .corpus import encode_example

    return [encode_example(d, vocab, cfg.max_input, cfg.max_output) for d in dialogues]


def cmd_train(args, cfg):
    from .corpus import build_vocabulary, load_corpus
    from .model import build_model
    from .training import TrainingDiverged, run_training

    train = load_corpus(args.train)
    val = load_corpus(args.val)
    vocab = build_vocabulary(train, cfg.vocab_cap)
    model = build_model(cfg.model_config(len(vocab)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg) + "\n")
    hp = cfg.hyperparams()
    try:
        res = run_training(model, _encode_all(train, vocab, cfg), _encode_all(val, vocab, cfg), hp, out, vocab)
    except TrainingDiverged as e:
        log.error("%s; best checkpoint so far kept at %s", e, out / "best.ckpt")
        return EXIT_RUNTIME
    _section("train", [f"steps\t{res.steps}", f"best_step\t{res.best_step}", f"best_val_nll\t{res.best_val:.6f}",
                       f"checkpoint\t{out / 'best.ckpt'}", f"metrics\t{out / 'metrics.csv'}",
                       f"figure\t{out / 'training_curve.png'}"])
    return EXIT_OK


def _load(args, cfg):
    from .training import load_model

    model, vocab, ck = load_model(args.ckpt)
    if args.config:
        expected = cfg.model_config(len(vocab)).fingerprint()
        if expected != ck.fingerprint:
            raise ConfigError(f"checkpoint fingerprint {ck.fingerprint} does not match config fingerprint {expected}")
    cfg.variant = ck.config.variant
    return model, vocab


def cmd_decode(args, cfg):
    from .beam import interactive_beam_search
    from .corpus import decode_ids, load_corpus

    model, vocab = _load(args, cfg)
    opts = cfg.decode_options()
    for k in ("min_len", "max_len", "ngram_block"):
        v = getattr(args, k)
        if v is not None:
            opts[k] = v or None if k == "ngram_block" else v
    if opts["min_len"] > opts["max_len"]:
        raise ValueError(f"min_len {opts['min_len']} exceeds max_len {opts['max_len']}")
    beam = args.beam if args.beam is not None else cfg.beam
    dialogues = load_corpus(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for ex in _encode_all(dialogues, vocab, cfg):
            res = interactive_beam_search(model, ex, beam, length_norm=cfg.length_norm, **opts)
            rec = {"id": ex.id,
                   "user_hyp": " ".join(decode_ids(res.user.output, vocab, ex.oovs)),
                   "agent_hyp": " ".join(decode_ids(res.agent.output, vocab, ex.oovs)),
                   "user_logprob": res.user.logprob, "agent_logprob": res.agent.logprob}
            fh.write(json.dumps(rec) + "\n")
    _section("decode", [f"examples\t{len(dialogues)}", f"beam\t{beam}", f"output\t{out}"])


def _read_hyps(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hyps[str(rec["id"])] = {"user": rec["user_hyp"].split(), "agent": rec["agent_hyp"].split()}
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad hypothesis record ({e})") from None
    return hyps


def cmd_eval(args, cfg):
    from .corpus import load_corpus
    from .metrics import evaluate

    hyps = _read_hyps(args.hyp)
    refs = {d.id: {"user": d.user_summary, "agent": d.agent_summary} for d in load_corpus(args.ref)}
    baseline = _read_hyps(args.baseline) if args.baseline else None
    report = evaluate(hyps, refs, cfg.period, cfg.match_threshold, baseline)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
    figure = path.with_suffix(".png")
    report.plot(figure)
    _section("eval", report.table().splitlines() + [f"report\t{path}", f"figure\t{figure}"])


def cmd_gradcheck(args, cfg):
    from .training import tiny_model_gradient_check

    errors = tiny_model_gradient_check(cfg.variant, cfg.interaction, cfg.seed, cfg.gradcheck_entries)
    worst = max(errors.values())
    bad = {k: v for k, v in errors.items() if not v <= cfg.gradcheck_threshold}
    lines = [f"{k}\t{v:.3e}" for k, v in sorted(errors.items(), key=lambda kv: -kv[1])]
    lines.append(f"max\t{worst:.3e}\tthreshold\t{cfg.gradcheck_threshold:.1e}\t{'FAIL' if bad else 'PASS'}")
    _section("gradcheck", lines)
    return EXIT_INVALID if bad else EXIT_OK


def cmd_attn_dump(args, cfg):
    from .corpus import load_corpus
    from .metrics import export_attention

    model, vocab = _load(args, cfg)
    dialogues = [d for d in load_corpus(args.input) if d.id == args.id]
    if not dialogues:
        raise ValueError(f"dialogue id {args.id!r} not found in {args.input}")
    ex = _encode_all(dialogues, vocab, cfg)[0]
    opts = cfg.decode_options()
    paths = export_attention(model, ex, args.out, opts["min_len"], opts["max_len"])
    _section("attn-dump", [str(p) for p in paths])


def build_parser():
    p = argparse.ArgumentParser(prog="rolesum", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true", help="print every config key with its value and exit")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="write a synthetic corpus split into train/val/test")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--integration-fraction", type=float, default=0.5)

    s = sub.add_parser("train", help="two-phase joint training")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("decode", help="interactive beam search over a corpus")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--beam", type=int)
    s.add_argument("--min-len", dest="min_len", type=int)
    s.add_argument("--max-len", dest="max_len", type=int)
    s.add_argument("--ngram-block", dest="ngram_block", type=int)

    s = sub.add_parser("eval", help="ROUGE, BLEU and sub-summary matching report")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--report", required=True, help="CSV path; a bar chart is written next to it")
    s.add_argument("--baseline", help="baseline hypotheses for paired t-tests")

    sub.add_parser("gradcheck", help="finite-difference check of a tiny model")

    s = sub.add_parser("attn-dump", help="export per-step attention of one dialogue")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--input", required=True, help="corpus file holding the dialogue")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "attn-dump": cmd_attn_dump}


def main(argv=None) -> int:
    parser = build_parser()
    # allow global options after the subcommand too
    args, rest = parser.parse_known_args(argv)
    if rest:
        extra = argparse.ArgumentParser(add_help=False)
        extra.add_argument("--config")
        extra.add_argument("--print-config", action="store_true")
        extra_args, unknown = extra.parse_known_args(rest)
        if unknown:
            parser.error(f"unrecognized arguments: {' '.join(unknown)}")
        args.config = extra_args.config or args.config
        args.print_config = args.print_config or extra_args.print_config
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.print_config:
            print(format_config(cfg))
            return EXIT_OK
        if not args.command:
            parser.print_help()
            return EXIT_INVALID
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - surface any other failure as a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
