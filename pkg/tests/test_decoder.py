import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rolesum import autodiff as ad
from rolesum.autodiff import Tape
from rolesum.corpus import (AGENT, BOS, ROLE_AGENT, ROLE_USER, ROLES, UNK, USER, EncodedExample, make_batch)
from rolesum.decoder import (FusionHead, coverage_teacher_forced, coverage_update_and_loss, fuse_and_project,
                             gold_probability, pointer_final_distribution)
from rolesum.model import INTERACTIONS, VARIANTS, ModelConfig, build_model
from rolesum.params import ParamStore

COMBOS = [(v, i) for v in VARIANTS for i in INTERACTIONS]


def _model(vocab_size, variant="recurrent", interaction="both", seed=0, **kw):
    kw.setdefault("embedding_dim", 8)
    kw.setdefault("hidden_dim", 12)
    return build_model(ModelConfig(vocab_size, variant=variant, interaction=interaction, dtype="float64",
                                   seed=seed, **kw))


def test_copy_endpoints():
    P_vocab = np.array([[0.1, 0.2, 0.3, 0.4]])
    att = np.array([[0.0, 1.0, 0.0]])
    ext = np.array([[2, 5, 1]])
    copy_only = pointer_final_distribution(P_vocab, np.array([[0.0]]), att, ext, 6).value
    npt.assert_array_equal(copy_only, [[0, 0, 0, 0, 0, 1]])
    gen_only = pointer_final_distribution(P_vocab, np.array([[1.0]]), att, ext, 6).value
    npt.assert_array_equal(gen_only, [[0.1, 0.2, 0.3, 0.4, 0, 0]])


def test_copy_accumulates_repeated_source_tokens():
    final = pointer_final_distribution(np.full((1, 3), 1 / 3), np.array([[0.5]]),
                                       np.array([[0.25, 0.25, 0.5]]), np.array([[1, 1, 0]]), 3).value
    npt.assert_allclose(final, [[1 / 6 + 0.25, 1 / 6 + 0.25, 1 / 6]])


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_final_distribution_sums_to_one(seed, n_oov):
    r = np.random.default_rng(seed)
    V, n = 7, 5
    P = ad.softmax(r.normal(size=(2, 3, V))).value
    att = ad.softmax(r.normal(size=(2, 3, n))).value
    p_gen = r.uniform(size=(2, 3, 1))
    ext = r.integers(0, V + n_oov, size=(2, n))
    final = pointer_final_distribution(P, p_gen, att, ext, V + n_oov).value
    npt.assert_allclose(final.sum(-1), 1, atol=1e-12)
    gold = r.integers(0, V + n_oov, size=(2, 3))
    npt.assert_allclose(gold_probability(P, p_gen, att, ext, gold).value,
                        np.take_along_axis(final, gold[..., None], -1)[..., 0], atol=1e-15)


def test_fusion_with_zero_weights_is_uniform():
    store = ParamStore(0, np.float64)
    head = FusionHead(store, "f", 6, 4, 9)
    for p in store:
        p.value[...] = 0
    P = fuse_and_project(head, np.ones((2, 3)), None, np.ones((2, 3))).value
    npt.assert_allclose(P, 1 / 9)


def test_coverage_first_step_zero_and_repeat_is_one():
    att = np.array([[0.2, 0.3, 0.5]])
    cov, loss = coverage_update_and_loss(None, att)
    assert float(loss.value[0]) == 0.0
    _, loss = coverage_update_and_loss(cov, att)
    npt.assert_allclose(loss.value, [1.0])


def test_coverage_total_mass_after_t_steps(rng):
    att = ad.softmax(rng.normal(size=(2, 5, 4))).value
    cov, losses = None, []
    for t in range(5):
        cov, loss = coverage_update_and_loss(cov, att[:, t])
        losses.append(loss.value)
    npt.assert_allclose(np.asarray(cov.value).sum(-1), 5)
    npt.assert_allclose(coverage_teacher_forced(att).value, np.stack(losses, 1), atol=1e-14)


def _gold_stepwise(model, ex):
    """Teacher-force the gold targets through the incremental step interface."""
    ctx = model.prepare(ex)
    tg = {r: ex.target(r) for r in ROLES}
    hist = {r: [()] for r in ROLES}
    cov = {r: [None] for r in ROLES}
    prev = {r: [BOS] for r in ROLES}
    out = {r: [] for r in ROLES}
    for t in range(max(len(v) for v in tg.values())):
        active = {r: [t < len(tg[r])] for r in ROLES}
        res = model.step(ctx, active, prev, hist, cov)
        for r in ROLES:
            if active[r][0]:
                o = res[r][0]
                g = tg[r][t]
                out[r].append(o.logp[g] if g < len(o.logp) else o.logp[UNK])
                hist[r] = [hist[r][0] + (o.record,)]
                cov[r] = [o.coverage]
                prev[r] = [g]
    return out


@pytest.mark.parametrize("variant,interaction", COMBOS)
def test_incremental_step_matches_teacher_forcing(variant, interaction, small_vocab_examples):
    vocab, exs = small_vocab_examples
    model = _model(len(vocab), variant, interaction)
    ex = next(e for e in exs if e.oovs)
    forced = model.forward(make_batch([ex], len(vocab)))
    stepped = _gold_stepwise(model, ex)
    for r in ROLES:
        npt.assert_allclose(stepped[r], forced[r].logp_gold.value[0], atol=1e-10)


@pytest.mark.parametrize("variant,interaction", COMBOS)
def test_padding_targets_does_not_change_real_steps(variant, interaction, small_vocab_examples):
    vocab, exs = small_vocab_examples
    model = _model(len(vocab), variant, interaction)
    ex = exs[3]
    base = model.forward(make_batch([ex], len(vocab)))
    pad = {r: len(ex.target(r)) + 4 for r in ROLES}
    long = model.forward(make_batch([ex], len(vocab), target_pad=pad))
    for r in ROLES:
        T = len(ex.target(r))
        npt.assert_allclose(long[r].logp_gold.value[0, :T], base[r].logp_gold.value[0], atol=1e-12)
        npt.assert_array_equal(long[r].step_mask[0, T:], 0)


@pytest.mark.parametrize("variant,interaction", COMBOS)
def test_future_targets_do_not_affect_earlier_steps(variant, interaction, small_vocab_examples):
    vocab, exs = small_vocab_examples
    model = _model(len(vocab), variant, interaction)
    ex = exs[5]
    base = model.forward(make_batch([ex], len(vocab)))
    t = 3
    changed = EncodedExample(ex.id, ex.input_ids, ex.ext_ids, ex.oovs, ex.role_ids,
                             ex.user_target_ids[:t] + [7] * (len(ex.user_target_ids) - t),
                             ex.agent_target_ids[:t] + [8] * (len(ex.agent_target_ids) - t))
    other = model.forward(make_batch([changed], len(vocab)))
    for r in ROLES:
        # step t consumes target t-1 as input, so steps 0..t are unaffected
        npt.assert_allclose(other[r].logp_gold.value[0, :t], base[r].logp_gold.value[0, :t], atol=1e-12)


def _mirror_example(ex):
    swap_tag = {ROLE_USER: ROLE_AGENT, ROLE_AGENT: ROLE_USER}
    swap_label = {USER: AGENT, AGENT: USER}
    return EncodedExample(ex.id, [swap_tag.get(i, i) for i in ex.input_ids],
                          [swap_tag.get(i, i) for i in ex.ext_ids], ex.oovs,
                          [swap_label.get(r, r) for r in ex.role_ids], ex.agent_target_ids, ex.user_target_ids)


def _mirror_params(model, mirror):
    state = model.store.state()
    swapped = {}
    for name, value in state.items():
        other = name.replace(".user.", ".TMP.").replace(".agent.", ".user.").replace(".TMP.", ".agent.")
        swapped[other] = value.copy()
    emb = swapped["embedding"]
    emb[[ROLE_USER, ROLE_AGENT]] = emb[[ROLE_AGENT, ROLE_USER]]
    mirror.store.load_state(swapped)


@pytest.mark.parametrize("variant,interaction", COMBOS)
def test_swapping_roles_swaps_outputs(variant, interaction, examples, vocab):
    model = _model(len(vocab), variant, interaction, seed=1)
    mirror = _model(len(vocab), variant, interaction, seed=2)
    _mirror_params(model, mirror)
    ex = examples[2]
    a = model.forward(make_batch([ex], len(vocab)))
    b = mirror.forward(make_batch([_mirror_example(ex)], len(vocab)))
    npt.assert_allclose(b["user"].logp_gold.value, a["agent"].logp_gold.value, atol=1e-12)
    npt.assert_allclose(b["agent"].logp_gold.value, a["user"].logp_gold.value, atol=1e-12)


def test_forced_p_role_selects_same_role_attention(examples, vocab):
    model = _model(len(vocab), "recurrent", "cross")
    out = model.forward(make_batch(examples[:2], len(vocab)), p_role=1.0)
    for r in ROLES:
        ex = out[r].extras
        npt.assert_array_equal(ex["att_final"].value, ex["att_same"].value)


@pytest.mark.parametrize("variant", VARIANTS)
def test_attention_rows_are_distributions_over_role_spans(variant, examples, vocab):
    batch = make_batch(examples[:3], len(vocab))
    model = _model(len(vocab), variant, "both")
    out = model.forward(batch)
    for r in ROLES:
        other = "agent" if r == "user" else "user"
        same, cross = out[r].acc_same.mean().value, out[r].acc_cross.mean().value
        npt.assert_allclose(same.sum(-1), 1, atol=1e-6)
        npt.assert_allclose(cross.sum(-1), 1, atol=1e-6)
        assert (same[batch.role_mask(r) == 0] == 0).all()
        assert (cross[batch.role_mask(other) == 0] == 0).all()


def _param_grads(model, batch, role):
    model.store.zero_grad()
    with Tape() as tape:
        out = model.forward(batch)
        tape.backward(-ad.sum_(out[role].logp_gold * out[role].step_mask))
    return {p.name: np.abs(p.grad).max() for p in model.params}


@pytest.mark.parametrize("variant", VARIANTS)
def test_role_attention_couples_the_decoders(variant, examples, vocab):
    batch = make_batch(examples[:2], len(vocab))
    coupled = _param_grads(_model(len(vocab), variant, "self"), batch, "user")
    assert max(v for k, v in coupled.items() if ".agent." in k) > 0
    separate = _param_grads(_model(len(vocab), variant, "none"), batch, "user")
    assert max(v for k, v in separate.items() if ".agent." in k) == 0
