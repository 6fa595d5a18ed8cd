import json
import subprocess
import sys

import pytest

from rolesum.cli import main
from rolesum.config import ConfigError, RunConfig, format_config, parse_config
from rolesum.corpus import load_corpus


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _write_config(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A corpus, a briefly trained checkpoint and its config."""
    root = tmp_path_factory.mktemp("run")
    cfg = _write_config(root / "run.cfg", embedding_dim=8, hidden_dim=12, max_steps=6, eval_every=3, batch_size=4,
                        max_len=6, min_len=0)
    assert main(["synth", "--out", str(root / "data"), "--n", "20", "--seed", "1"]) == 0
    assert main(["--config", str(cfg), "train", "--train", str(root / "data/train.jsonl"),
                 "--val", str(root / "data/val.jsonl"), "--out", str(root / "model")]) == 0
    return root, cfg


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "synth", "--out", tmp_path / name, "--n", 10, "--seed", 4)
        assert code == 0 and "=== synth ===" in out and "=== end synth ===" in out
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()


def test_synth_rejects_empty_corpus(tmp_path, capsys):
    code, _, err = _run(capsys, "synth", "--out", tmp_path, "--n", 0)
    assert code == 1 and "--n" in err


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RIS_SEED", "4")
    _run(capsys, "synth", "--out", tmp_path / "env", "--n", 10)
    monkeypatch.delenv("RIS_SEED")
    _run(capsys, "synth", "--out", tmp_path / "flag", "--n", 10, "--seed", 4)
    assert (tmp_path / "env/train.jsonl").read_bytes() == (tmp_path / "flag/train.jsonl").read_bytes()


def test_bad_seed_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RIS_SEED", "abc")
    code, _, err = _run(capsys, "synth", "--out", tmp_path, "--n", 3)
    assert code == 1 and "RIS_SEED" in err


def test_print_config_lists_every_key(capsys):
    code, out, _ = _run(capsys, "--print-config")
    assert code == 0
    assert out.strip() == format_config(RunConfig())
    assert len(out.strip().splitlines()) == len(RunConfig.__dataclass_fields__)
    code2, out2, _ = _run(capsys, "gradcheck", "--print-config")
    assert code2 == 0 and out2 == out


def test_config_errors_carry_line_numbers(tmp_path, capsys):
    with pytest.raises(ConfigError, match=":2: unknown key 'colour'"):
        parse_config("beam = 3\ncolour = red\n", "f.cfg")
    with pytest.raises(ConfigError, match=":3: duplicate key 'beam'"):
        parse_config("beam = 3\n\nbeam = 4\n", "f.cfg")
    with pytest.raises(ConfigError, match=":1: bad value for beam"):
        parse_config("beam = wide\n", "f.cfg")
    with pytest.raises(ConfigError, match="alpha"):
        parse_config("alpha = 3\n")
    cfg = _write_config(tmp_path / "x.cfg", colour="red")
    code, _, err = _run(capsys, "--config", cfg, "--print-config")
    assert code == 1 and "x.cfg:1" in err


def test_config_values_and_auto():
    cfg = parse_config("# comment\nbeta = auto\nper_token = yes  # inline\nmin_len = 4\n")
    assert cfg.beta is None and cfg.per_token is True and cfg.decode_options()["min_len"] == 4
    assert parse_config("variant = transformer\n").decode_options() == {"min_len": 15, "max_len": 200,
                                                                         "ngram_block": 5}


def test_missing_input_exits_with_validation_code(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--train", tmp_path / "none.jsonl", "--val", tmp_path / "none.jsonl",
                        "--out", tmp_path)
    assert code == 1 and "none.jsonl" in err


def test_module_entry_point_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rolesum", "synth", "--out", str(tmp_path), "--n", "0"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "error" in res.stderr


def test_train_writes_artifacts(trained):
    root, _ = trained
    for name in ("best.ckpt", "metrics.csv", "training_curve.png", "config.txt"):
        assert (root / "model" / name).stat().st_size > 0


def test_decode_then_eval(trained, capsys):
    root, cfg = trained
    hyp = root / "hyp.jsonl"
    code, out, _ = _run(capsys, "--config", cfg, "decode", "--ckpt", root / "model/best.ckpt",
                        "--input", root / "data/test.jsonl", "--out", hyp, "--beam", 2)
    assert code == 0 and "=== decode ===" in out
    recs = [json.loads(line) for line in hyp.read_text().splitlines()]
    assert [r["id"] for r in recs] == [d.id for d in load_corpus(root / "data/test.jsonl")]
    assert set(recs[0]) == {"id", "user_hyp", "agent_hyp", "user_logprob", "agent_logprob"}
    code, out, _ = _run(capsys, "eval", "--hyp", hyp, "--ref", root / "data/test.jsonl",
                        "--report", root / "report.csv", "--baseline", hyp)
    assert code == 0 and "=== eval ===" in out and (root / "report.png").exists()


def test_decode_beam_one_matches_greedy(trained, capsys):
    from rolesum.beam import greedy_decode
    from rolesum.corpus import decode_ids, encode_example
    from rolesum.training import load_model

    root, cfg = trained
    hyp = root / "b1.jsonl"
    _run(capsys, "--config", cfg, "decode", "--ckpt", root / "model/best.ckpt", "--input", root / "data/test.jsonl",
         "--out", hyp, "--beam", 1, "--max-len", 6, "--min-len", 0)
    model, vocab, _ = load_model(root / "model/best.ckpt")
    recs = [json.loads(line) for line in hyp.read_text().splitlines()]
    for d, rec in zip(load_corpus(root / "data/test.jsonl"), recs):
        ex = encode_example(d, vocab)
        g = greedy_decode(model, ex, min_len=0, max_len=6)
        assert rec["user_hyp"] == " ".join(decode_ids(g.user.output, vocab, ex.oovs))
        assert rec["agent_hyp"] == " ".join(decode_ids(g.agent.output, vocab, ex.oovs))


def test_eval_of_references_is_perfect(trained, capsys):
    root, _ = trained
    gold = root / "gold.jsonl"
    with open(gold, "w") as fh:
        for d in load_corpus(root / "data/test.jsonl"):
            fh.write(json.dumps({"id": d.id, "user_hyp": " ".join(d.user_summary),
                                 "agent_hyp": " ".join(d.agent_summary)}) + "\n")
    code, out, _ = _run(capsys, "eval", "--hyp", gold, "--ref", root / "data/test.jsonl", "--report", root / "g.csv")
    assert code == 0
    mean_rows = [line.split(",") for line in (root / "g.csv").read_text().splitlines() if line.startswith("MEAN")]
    assert len(mean_rows) == 2
    assert all(float(v) == 1.0 for row in mean_rows for v in row[2:])


def test_eval_rejects_misaligned_ids(trained, tmp_path, capsys):
    root, _ = trained
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "nope", "user_hyp": "a", "agent_hyp": "b"}) + "\n")
    code, _, err = _run(capsys, "eval", "--hyp", bad, "--ref", root / "data/test.jsonl", "--report", tmp_path / "r.csv")
    assert code == 1 and "unexpected ['nope']" in err


def test_attention_dump(trained, tmp_path, capsys):
    root, cfg = trained
    d = load_corpus(root / "data/test.jsonl")[0]
    code, out, _ = _run(capsys, "--config", cfg, "attn-dump", "--ckpt", root / "model/best.ckpt", "--id", d.id,
                        "--input", root / "data/test.jsonl", "--out", tmp_path)
    assert code == 0 and (tmp_path / f"{d.id}.user.attention.csv").exists()
    code, _, err = _run(capsys, "attn-dump", "--ckpt", root / "model/best.ckpt", "--id", "missing",
                        "--input", root / "data/test.jsonl", "--out", tmp_path)
    assert code == 1 and "missing" in err


def test_corrupt_checkpoint_is_a_validation_error(trained, tmp_path, capsys):
    root, _ = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((root / "model/best.ckpt").read_bytes()[:-8])
    code, _, err = _run(capsys, "decode", "--ckpt", bad, "--input", root / "data/test.jsonl",
                        "--out", tmp_path / "o.jsonl")
    assert code == 1 and "bytes" in err


def test_checkpoint_config_mismatch(trained, tmp_path, capsys):
    root, _ = trained
    other = _write_config(tmp_path / "o.cfg", embedding_dim=16, hidden_dim=12)
    code, _, err = _run(capsys, "--config", other, "decode", "--ckpt", root / "model/best.ckpt",
                        "--input", root / "data/test.jsonl", "--out", tmp_path / "o.jsonl")
    assert code == 1 and "fingerprint" in err


def test_gradcheck_command(tmp_path, capsys):
    cfg = _write_config(tmp_path / "g.cfg", gradcheck_entries=1, interaction="cross")
    code, out, _ = _run(capsys, "--config", cfg, "gradcheck")
    assert code == 0 and "PASS" in out
    strict = _write_config(tmp_path / "s.cfg", gradcheck_entries=1, interaction="cross", gradcheck_threshold=0.0)
    code, out, _ = _run(capsys, "--config", strict, "gradcheck")
    assert code == 1 and "FAIL" in out
