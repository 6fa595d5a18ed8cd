import numpy as np
import numpy.testing as npt
import pytest

from rolesum import autodiff as ad
from rolesum.corpus import RoleMasks
from rolesum.encoder import (LSTM, BiLSTMEncoder, RoleEmptyError, TransformerEncoder, lstm_cell, split_contexts)
from rolesum.params import ParamStore


def _store(dtype=np.float64, seed=0):
    return ParamStore(seed, dtype)


def test_lstm_zero_weights_give_zero_hidden(rng):
    store = _store()
    cell = LSTM(store, "l", 3, 4)
    for p in store:
        p.value[...] = 0
    h, c = cell.cell(rng.normal(size=(2, 3)), cell.zero_state(2, np.float64))
    assert (h.value == 0).all() and (c.value == 0).all()


def test_lstm_cell_gradients(rng):
    store = _store()
    cell = LSTM(store, "l", 3, 4)
    x = store.add("x", (2, 3), "normal", 1.0)
    h0 = store.add("h0", (2, 4), "normal", 1.0)
    c0 = store.add("c0", (2, 4), "normal", 1.0)
    w = rng.normal(size=(2, 4))

    def loss():
        h, c = lstm_cell(x, (h0, c0), cell.W_x, cell.W_h, cell.b)
        return ad.sum_(h * w) + ad.sum_(c * w)
    assert max(ad.check_gradients(loss, store, eps=1e-6).values()) < 1e-5


def test_lstm_cell_is_pure(rng):
    cell = LSTM(_store(), "l", 3, 4)
    x = rng.normal(size=(1, 3))
    a = cell.cell(x, cell.zero_state(1, np.float64))[0].value
    b = cell.cell(x, cell.zero_state(1, np.float64))[0].value
    npt.assert_array_equal(a, b)


def test_bilstm_single_position():
    enc = BiLSTMEncoder(_store(), 3, 5)
    out = enc(np.ones((1, 1, 3)), np.ones((1, 1)))
    assert out.H.shape == (1, 1, 10)
    # with one step both directions read the same input from the zero state
    npt.assert_allclose(out.final_state[0].value, out.H.value[:, 0])


def test_bilstm_palindrome_with_tied_weights_mirrors_rows():
    store = _store()
    enc = BiLSTMEncoder(store, 3, 4)
    for name in ("W_x", "W_h", "b"):
        store[f"enc.bw.{name}"].value[...] = store[f"enc.fw.{name}"].value
    table = np.random.default_rng(1).normal(size=(6, 3))
    ids = np.array([1, 4, 2, 4, 1])
    H = enc(table[ids][None], np.ones((1, 5))).H.value[0]
    npt.assert_allclose(H[:, :4], H[::-1, 4:], atol=1e-12)


def test_bilstm_pad_positions_do_not_change_real_outputs(rng):
    enc = BiLSTMEncoder(_store(), 3, 4)
    x = rng.normal(size=(1, 4, 3))
    short = enc(x, np.ones((1, 4))).H.value
    padded_x = np.concatenate([x, rng.normal(size=(1, 3, 3))], axis=1)
    long = enc(padded_x, np.array([[1, 1, 1, 1, 0, 0, 0]])).H.value
    npt.assert_allclose(long[:, :4], short, atol=1e-12)


def test_bilstm_gradients(rng):
    store = _store()
    enc = BiLSTMEncoder(store, 3, 4)
    x = store.add("x", (2, 4, 3), "normal", 1.0)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]])
    w = rng.normal(size=(2, 4, 8))

    def loss():
        out = enc(x, mask)
        return ad.sum_(out.H * w) + ad.sum_(out.final_state[1])
    assert max(ad.check_gradients(loss, store, eps=1e-6).values()) < 1e-5


def test_transformer_encoder_without_layers_is_embedding_plus_position(rng):
    store = _store()
    enc = TransformerEncoder(store, 4, 8, 2, 0, 10)
    x = rng.normal(size=(2, 5, 4))
    H = enc(x, np.ones((2, 5))).H.value
    npt.assert_array_equal(H, x + store["enc.pos"].value[:5])


def test_transformer_encoder_rejects_long_input():
    enc = TransformerEncoder(_store(), 4, 8, 2, 1, 3)
    with pytest.raises(ValueError, match="positional table"):
        enc(np.zeros((1, 4, 4)), np.ones((1, 4)))


def test_transformer_encoder_gradients(rng):
    store = _store()
    enc = TransformerEncoder(store, 4, 6, 2, 1, 8)
    x = store.add("x", (2, 5, 4), "normal", 1.0)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]])
    w = rng.normal(size=(2, 5, 4))

    def loss():
        return ad.sum_(enc(x, mask).H * w)
    assert max(ad.check_gradients(loss, store, eps=1e-6).values()) < 1e-3


def test_transformer_encoder_ignores_pad_content(rng):
    enc = TransformerEncoder(_store(), 4, 6, 2, 2, 8)
    x = rng.normal(size=(1, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0]])
    y = x.copy()
    y[:, 3:] = rng.normal(size=(1, 2, 4))
    npt.assert_allclose(enc(x, mask).H.value[:, :3], enc(y, mask).H.value[:, :3], atol=1e-12)


def test_split_contexts_views():
    H = ad.Tensor(np.arange(6.0).reshape(1, 3, 2))
    u, a = split_contexts(H, RoleMasks(np.array([[1, 1, 0]]), np.array([[0, 0, 1]])))
    assert list(u.positions()) == [0, 1] and list(a.positions()) == [2]


def test_split_contexts_flags_empty_role():
    with pytest.raises(RoleEmptyError, match="agent"):
        split_contexts(None, RoleMasks(np.array([[1, 1]]), np.array([[0, 0]])))
