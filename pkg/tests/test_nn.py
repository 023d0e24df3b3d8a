import math

import numpy as np
import pytest

from dara import tensor as T
from dara.adapters import DAAdapter
from dara.errors import ConfigError, DataError
from dara.gradcheck import finite_diff_check
from dara.nn import (PARALLEL, SEQUENTIAL, EncoderLayer, MultiHeadAttention, Slot,
                     embed_tokens, encoder_layer_forward, mha_forward)
from dara.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def test_single_token_attention_is_one():
    mha = MultiHeadAttention(8, 2, rng())
    _, attn = mha_forward(Tensor(rng(1).normal(size=(1, 8))), mha)
    assert attn.shape == (2, 1, 1)
    assert np.array_equal(attn.data, np.ones((2, 1, 1)))


def test_zero_query_key_gives_uniform_rows():
    mha = MultiHeadAttention(8, 4, rng())
    mha.q.W.data[...] = 0.0
    mha.q.b.data[...] = 0.0
    mha.k.W.data[...] = 0.0
    _, attn = mha_forward(Tensor(rng(1).normal(size=(5, 8))), mha)
    np.testing.assert_array_equal(attn.data, np.full((4, 5, 5), 0.2))


def test_two_token_one_head_hand_case():
    mha = MultiHeadAttention(2, 1, rng())
    mha.q.W.data[...] = [[1.0, 0.0], [0.0, 2.0]]
    mha.q.b.data[...] = 0.0
    mha.k.W.data[...] = [[0.5, 1.0], [1.0, 0.0]]
    mha.v.W.data[...] = np.eye(2)
    mha.v.b.data[...] = [0.1, -0.1]
    mha.o.W.data[...] = [[1.0, 1.0], [0.0, 1.0]]
    mha.o.b.data[...] = 0.0
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, attn = mha_forward(Tensor(x), mha)

    q = x @ mha.q.W.data
    k = x @ mha.k.W.data
    v = x @ np.eye(2) + [0.1, -0.1]
    expected_out = np.zeros((2, 2))
    expected_attn = np.zeros((2, 2))
    for i in range(2):
        scores = [float(q[i] @ k[j]) / math.sqrt(2.0) for j in range(2)]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        p = [ej / sum(e) for ej in e]
        expected_attn[i] = p
        mixed = p[0] * v[0] + p[1] * v[1]
        expected_out[i] = mixed @ mha.o.W.data
    np.testing.assert_allclose(attn.data[0], expected_attn, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.data, expected_out, rtol=0, atol=1e-12)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, rng())


def test_attention_rows_sum_to_one():
    layer = EncoderLayer(12, 3, rng())
    _, attn = layer(Tensor(rng(2).normal(size=(2, 7, 12))))
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, rtol=0, atol=1e-10)


def test_empty_slots_match_plain_post_ln():
    layer = EncoderLayer(8, 2, rng(), d_ff=16)
    x = Tensor(rng(3).normal(size=(4, 8)))
    a, _ = layer.mha(x)
    h = layer.ln1(x + a)
    expected = layer.ln2(h + layer.ffn(h))
    assert np.array_equal(encoder_layer_forward(x, layer).data, expected.data)


def test_empty_slot_is_bit_identical_to_fresh_layer():
    a = EncoderLayer(8, 2, rng(4))
    b = EncoderLayer(8, 2, rng(4))
    b.attach("mha", Slot(DAAdapter(8, 2, 0.1, rng(5))))
    b.attach("mha", None)
    x = Tensor(rng(6).normal(size=(3, 8)))
    assert encoder_layer_forward(x, a).data.tobytes() == encoder_layer_forward(x, b).data.tobytes()


@pytest.mark.parametrize("form", [SEQUENTIAL, PARALLEL])
def test_zero_scale_slots_equal_empty(form):
    plain = EncoderLayer(8, 2, rng(7))
    slotted = EncoderLayer(8, 2, rng(7))
    slotted.attach("mha", Slot(DAAdapter(8, 3, 0.0, rng(8)), form))
    slotted.attach("ffn", Slot(DAAdapter(8, 3, 0.0, rng(9)), form))
    x = Tensor(rng(10).normal(size=(5, 8)))
    assert np.array_equal(encoder_layer_forward(x, slotted).data,
                          encoder_layer_forward(x, plain).data)


def test_parallel_slot_reads_sublayer_input():
    layer = EncoderLayer(8, 2, rng(11))
    adapter = DAAdapter(8, 3, 0.1, rng(12))
    layer.attach("ffn", Slot(adapter, PARALLEL))
    x = Tensor(rng(13).normal(size=(4, 8)))
    a, _ = layer.mha(x)
    h = layer.ln1(x + a)
    expected = layer.ln2(h + (layer.ffn(h) + adapter.branch(h)))
    np.testing.assert_array_equal(encoder_layer_forward(x, layer).data, expected.data)


def test_adapter_width_mismatch():
    layer = EncoderLayer(8, 2, rng())
    with pytest.raises(ConfigError):
        layer.attach("ffn", Slot(DAAdapter(6, 2, 0.1, rng())))
    with pytest.raises(ConfigError):
        layer.attach("middle", None)
    with pytest.raises(ConfigError):
        Slot(DAAdapter(8, 2, 0.1, rng()), "diagonal")


def test_layer_gradcheck():
    layer = EncoderLayer(8, 2, rng(14), d_ff=12)
    layer.attach("mha", Slot(DAAdapter(8, 2, 0.1, rng(15)), SEQUENTIAL))
    layer.attach("ffn", Slot(DAAdapter(8, 2, 0.1, rng(16)), PARALLEL))
    x = Tensor(rng(17).normal(size=(3, 8)))
    w = rng(18).normal(size=(3, 8))
    params = layer.parameters()
    err = finite_diff_check(lambda: (encoder_layer_forward(x, layer) * w).sum(), params)
    assert err < 1e-6


def test_head_permutation_symmetry():
    d, heads = 12, 3
    layer = EncoderLayer(d, heads, rng(19))
    x = Tensor(rng(20).normal(size=(5, d)))
    before = encoder_layer_forward(x, layer).data

    dh = d // heads
    perm = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in (2, 0, 1)])
    m = layer.mha
    for lin in (m.q, m.k, m.v):
        lin.W.data[...] = lin.W.data[:, perm]
        if lin.b is not None:
            lin.b.data[...] = lin.b.data[perm]
    m.o.W.data[...] = m.o.W.data[perm, :]
    after = encoder_layer_forward(x, layer).data
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


def test_embed_single_id_with_zero_pos():
    table = Tensor(rng(21).normal(size=(5, 4)))
    out = embed_tokens([0], table, Tensor(np.zeros((3, 4))))
    assert np.array_equal(out.data, table.data[:1])


def test_embed_repeated_ids_repeat_rows():
    table = Tensor(rng(22).normal(size=(5, 4)))
    pos = Tensor(rng(23).normal(size=(4, 4)))
    out = embed_tokens([3, 3, 1], table, pos).data - pos.data[:3]
    np.testing.assert_allclose(out[0], out[1], rtol=0, atol=1e-15)


def test_embed_errors():
    table, pos = Tensor(np.zeros((5, 4))), Tensor(np.zeros((2, 4)))
    with pytest.raises(DataError):
        embed_tokens([5], table, pos)
    with pytest.raises(DataError):
        embed_tokens([-1], table, pos)
    with pytest.raises(DataError):
        embed_tokens([0, 1, 2], table, pos)


def test_embed_table_gradcheck():
    table = Tensor(rng(24).normal(size=(6, 3)), requires_grad=True)
    pos = Tensor(rng(25).normal(size=(4, 3)), requires_grad=True)
    w = rng(26).normal(size=(2, 4, 3))
    ids = np.array([[1, 4, 4, 0], [5, 1, 2, 2]])
    err = finite_diff_check(lambda: (T.sigmoid(embed_tokens(ids, table, pos)) * w).sum(),
                            [table, pos])
    assert err < 1e-6
