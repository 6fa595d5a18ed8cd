import json

import numpy as np
import numpy.testing as npt
import pytest

from rolesum.corpus import (AGENT, BOS, EOS, PAD, ROLE_AGENT, ROLE_USER, UNK, USER, CorpusError, Dialogue,
                            Utterance, Vocabulary, batch_iterator, build_role_masks, build_vocabulary, decode_ids,
                            encode_example, generate_synthetic_corpus, load_corpus, make_batch, save_corpus,
                            serialize_dialogue, split_corpus)


def _dialogue(*turns, user_summary="u s", agent_summary="a s", id="d"):
    return Dialogue(id, [Utterance(r, t.split()) for r, t in turns], user_summary.split(), agent_summary.split())


def _record(**overrides):
    rec = {"id": "x", "utterances": [{"role": "user", "text": "hi"}, {"role": "agent", "text": "hello"}],
           "user_summary": "user greets", "agent_summary": "agent greets"}
    rec.update(overrides)
    return rec


def test_load_two_line_file(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(_record(id="a")) + "\n" + json.dumps(_record(id="b")) + "\n")
    ds = load_corpus(p)
    assert [d.id for d in ds] == ["a", "b"]
    assert ds[0].utterances[1].text == ["hello"]


def test_load_missing_field_is_named_with_line_number(tmp_path):
    rec = _record()
    del rec["agent_summary"]
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(_record()) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(CorpusError, match=r"c.jsonl:2: missing field 'agent_summary'"):
        load_corpus(p)


def test_load_malformed_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(_record()) + "\n{not json\n")
    with pytest.raises(CorpusError, match=":2: malformed JSON"):
        load_corpus(p)


def test_load_directory_split(tmp_path):
    save_corpus(generate_synthetic_corpus(3, seed=0), tmp_path / "val.jsonl")
    assert len(load_corpus(tmp_path, "val")) == 3
    with pytest.raises(CorpusError, match="split"):
        load_corpus(tmp_path)


def test_dialogue_requires_both_roles():
    with pytest.raises(CorpusError, match="each role"):
        Dialogue.from_json(_record(utterances=[{"role": "user", "text": "hi"}]))


def test_loader_smoke_file_with_9101_records(tmp_path):
    ds = generate_synthetic_corpus(9101, seed=11)
    save_corpus(ds, tmp_path / "train.jsonl")
    loaded = load_corpus(tmp_path / "train.jsonl")
    assert len(loaded) == 9101
    assert loaded[-1].to_json() == ds[-1].to_json()


def test_serialize_dialogue_and_truncation():
    d = _dialogue(("user", "a b"), ("agent", "c"))
    tokens, roles = serialize_dialogue(d)
    assert tokens == ["<user>", "a", "b", "<agent>", "c"]
    assert roles == [USER, USER, USER, AGENT, AGENT]
    assert serialize_dialogue(d, max_input=3)[0] == ["<user>", "a", "b"]
    masks = build_role_masks(roles)
    npt.assert_array_equal(np.maximum(masks.user, masks.agent), 1)


def test_serialize_skips_empty_utterance(caplog):
    d = _dialogue(("user", "a"), ("agent", ""), ("agent", "c"))
    tokens, _ = serialize_dialogue(d)
    assert tokens == ["<user>", "a", "<agent>", "c"]
    assert "empty utterance" in caplog.text


def test_role_tags_map_to_reserved_ids():
    v = Vocabulary()
    assert v.id("<user>") == ROLE_USER and v.id("<agent>") == ROLE_AGENT


def test_vocabulary_counting_cap_and_ties():
    d = _dialogue(("user", "a a a b b"), ("agent", "c"), user_summary="x", agent_summary="y")
    v = build_vocabulary([d], cap=2)
    assert v.itos[6:] == ["a", "b"]
    assert v.id("c") == UNK
    tie = _dialogue(("user", "b a"), ("agent", "b a"), user_summary="q", agent_summary="q q")
    v2 = build_vocabulary([tie], cap=3)
    assert v2.itos[6:] == ["q", "a", "b"]


def test_vocabulary_default_cap_is_10000():
    assert build_vocabulary.__defaults__ == (10000,)


def test_build_role_masks_example():
    m = build_role_masks([USER, USER, AGENT])
    npt.assert_array_equal(m.user, [1, 1, 0])
    npt.assert_array_equal(m.agent, [0, 0, 1])


def test_role_masks_disjoint_on_random_corpora():
    for seed in range(5):
        for d in generate_synthetic_corpus(30, seed=seed):
            m = build_role_masks(serialize_dialogue(d)[1])
            assert (m.user * m.agent == 0).all()
            assert (np.maximum(m.user, m.agent) == 1).all()


def test_synthetic_corpus_is_deterministic():
    a = generate_synthetic_corpus(1, seed=7)
    b = generate_synthetic_corpus(1, seed=7)
    assert [d.to_json() for d in a] == [d.to_json() for d in b]


def _object_span(summary):
    # "... {topic} for {adj} {color} {noun} ." repeated per topic
    spans, i = [], 0
    while "for" in summary[i:]:
        j = summary.index("for", i)
        spans.append((summary[j - 1], tuple(summary[j + 1: j + 4])))
        i = j + 1
    return spans


def _contains(seq, span):
    return any(tuple(seq[i: i + len(span)]) == span for i in range(len(seq) - len(span) + 1))


def test_integration_fraction_zero_agent_content_in_agent_turns():
    for d in generate_synthetic_corpus(50, seed=2, integration_fraction=0.0):
        agent_tokens = [t for u in d.utterances if u.role == "agent" for t in u.text]
        for topic, span in _object_span(d.agent_summary):
            assert topic in agent_tokens and _contains(agent_tokens, span)


def test_integration_fraction_one_needs_user_content():
    for d in generate_synthetic_corpus(50, seed=2, integration_fraction=1.0):
        assert d.needs_integration
        agent_tokens = [t for u in d.utterances if u.role == "agent" for t in u.text]
        user_tokens = [t for u in d.utterances if u.role == "user" for t in u.text]
        for _, span in _object_span(d.agent_summary):
            assert len(span) >= 3 and _contains(user_tokens, span) and not _contains(agent_tokens, span)


def test_encode_example_oovs_and_targets():
    d = _dialogue(("user", "known zzz"), ("agent", "known"), user_summary="zzz known", agent_summary="qqq")
    v = Vocabulary(["known"])
    ex = encode_example(d, v)
    assert ex.oovs == ["zzz"]
    assert ex.input_ids[2] == UNK and ex.ext_ids[2] == len(v)
    assert ex.user_target_ids == [len(v), v.id("known"), EOS]
    assert ex.agent_target_ids == [UNK, EOS]
    assert decode_ids(ex.user_target_ids, v, ex.oovs) == ["zzz", "known"]


def test_batch_padding_rule():
    v = Vocabulary(["a", "b"])
    short = encode_example(_dialogue(("user", "a"), ("agent", "b")), v)
    long = encode_example(_dialogue(("user", "a a a"), ("agent", "b")), v)
    assert len(short.input_ids) == 4 and len(long.input_ids) == 6
    b = make_batch([short, long], len(v))
    npt.assert_array_equal(b.pad_mask[0], [1, 1, 1, 1, 0, 0])
    assert (b.input_ids[0, 4:] == PAD).all()
    tin, tout, tmask = b.targets["user"]
    assert tin[0, 0] == BOS and tout[0, -1] == EOS


def test_batch_size_one_has_no_padding(examples, vocab):
    for b in batch_iterator(examples[:4], 1, len(vocab)):
        assert b.size == 1 and b.pad_mask.all()


def test_shuffled_iteration_reproducible(examples, vocab):
    def ids(seed):
        return [b.ids for b in batch_iterator(examples, 3, len(vocab), shuffle=True, seed=seed)]
    assert ids(5) == ids(5)
    assert ids(5) != ids(6)


def test_split_corpus_fractions():
    s = split_corpus(list(range(100)))
    assert [len(s[k]) for k in ("train", "val", "test")] == [80, 10, 10]
