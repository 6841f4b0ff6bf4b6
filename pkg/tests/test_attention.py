import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from scama.attention import (
    FSMNMemory,
    LayerKVCache,
    MultiHeadAttention,
    SANMLayer,
    block_causal_mask,
    fsmn_memory,
    lc_attend_chunk,
    mask_to_bias,
    multihead_self_attention,
    san_m_block,
)
from scama.tensor import Tensor, layer_norm, relu


def naive_mha(x, att, mask=None):
    """Per-head nested loops, straight from the definition."""
    T, d = x.shape
    h, dk = att.heads, att.d_k
    heads = np.zeros((T, h * dk))
    for i in range(h):
        cols = slice(i * dk, (i + 1) * dk)
        q = x @ att.wq.data[:, cols]
        k = x @ att.wk.data[:, cols]
        v = x @ att.wv.data[:, cols]
        for t in range(T):
            scores = np.array([q[t] @ k[s] / np.sqrt(dk) for s in range(T)])
            if mask is not None:
                scores = np.where(mask[t], scores, -np.inf)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            heads[t, cols] = sum(w[s] * v[s] for s in range(T))
    return heads @ att.wo.data


def layer(rng, d=8, h=2, look_back=3, look_ahead=0, source="values"):
    return SANMLayer(d, h, 16, look_back, look_ahead, rng, 0.0, source)


def test_mha_matches_naive_loops():
    rng = np.random.default_rng(0)
    att = MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(4, 8))
    out = multihead_self_attention(Tensor(x), att).data
    assert np.abs(out - naive_mha(x, att)).max() < 1e-10
    mask = block_causal_mask(4, 3)
    out = multihead_self_attention(Tensor(x), att, mask).data
    assert np.abs(out - naive_mha(x, att, mask)).max() < 1e-10


def test_mha_single_step_is_value_path():
    rng = np.random.default_rng(1)
    att = MultiHeadAttention(8, 4, rng)
    x = rng.normal(size=(1, 8))
    expected = (x @ att.wv.data) @ att.wo.data
    np.testing.assert_allclose(multihead_self_attention(Tensor(x), att).data, expected, atol=1e-12)


def test_mha_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(2)
    att = MultiHeadAttention(8, 2, rng)
    x = np.repeat(rng.normal(size=(1, 8)), 5, axis=0)
    out = multihead_self_attention(Tensor(x), att).data
    np.testing.assert_allclose(out, np.repeat(out[:1], 5, axis=0), atol=1e-12)


def test_mha_all_forbidden_row_is_numeric_error():
    rng = np.random.default_rng(3)
    att = MultiHeadAttention(4, 2, rng)
    mask = np.zeros((2, 2), dtype=bool)
    with pytest.raises(FloatingPointError):
        multihead_self_attention(Tensor(rng.normal(size=(2, 4))), att, mask)


def test_heads_must_divide_d_model():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4, np.random.default_rng(0))


def test_fsmn_zero_taps_identity():
    mem = FSMNMemory(3, 2, 1, np.random.default_rng(0))
    mem.back.data[:] = 0
    mem.ahead.data[:] = 0
    v = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(fsmn_memory(Tensor(v), mem).data, v)


def test_fsmn_hand_oracle_look_back():
    mem = FSMNMemory(1, 2, 0, np.random.default_rng(0))
    mem.back.data[:] = 0.5
    out = fsmn_memory(Tensor([[1.0], [2.0], [3.0]]), mem).data
    np.testing.assert_allclose(out.ravel(), [1.5, 3.5, 5.5])


def test_fsmn_hand_oracle_look_ahead():
    mem = FSMNMemory(1, 0, 1, np.random.default_rng(0))
    mem.ahead.data[:] = 1.0
    out = fsmn_memory(Tensor([[1.0], [2.0], [3.0]]), mem).data
    np.testing.assert_allclose(out.ravel(), [3.0, 5.0, 3.0])


def test_fsmn_matches_direct_convolution():
    rng = np.random.default_rng(4)
    mem = FSMNMemory(3, 4, 2, rng)
    v = rng.normal(size=(9, 3))
    T = len(v)
    expected = v.copy()
    for t in range(T):
        for i in range(4):
            if t - i >= 0:
                expected[t] += mem.back.data[i] * v[t - i]
        for j in range(1, 3):
            if t + j < T:
                expected[t] += mem.ahead.data[j - 1] * v[t + j]
    np.testing.assert_allclose(fsmn_memory(Tensor(v), mem).data, expected, atol=1e-12)


def test_fsmn_history_equals_unchunked():
    rng = np.random.default_rng(5)
    mem = FSMNMemory(3, 4, 0, rng)
    v = rng.normal(size=(7, 3))
    whole = fsmn_memory(Tensor(v), mem).data
    np.testing.assert_allclose(mem(Tensor(v[4:]), v[1:4]).data, whole[4:], atol=1e-12)


def hand_transformer_block(x, lyr: SANMLayer):
    """Post-norm block whose attention sublayer output is MHA(x) + x W^V."""
    att = lyr.att
    y = naive_mha(x, att) + x @ att.wv.data
    h = layer_norm(Tensor(x + y), lyr.ln1.gain, lyr.ln1.bias).data
    f = relu(Tensor(h @ lyr.ffn.w1.weight.data + lyr.ffn.w1.bias.data)).data @ lyr.ffn.w2.weight.data + lyr.ffn.w2.bias.data
    return layer_norm(Tensor(h + f), lyr.ln2.gain, lyr.ln2.bias).data


def test_san_m_zero_taps_is_transformer_block():
    rng = np.random.default_rng(6)
    lyr = layer(rng, look_back=3, look_ahead=2)
    lyr.mem.back.data[:] = 0
    lyr.mem.ahead.data[:] = 0
    x = rng.normal(size=(6, 8))
    np.testing.assert_allclose(san_m_block(Tensor(x), lyr).data, hand_transformer_block(x, lyr), atol=1e-10)


@pytest.mark.parametrize("T", [1, 5, 17])
def test_san_m_shape(T):
    rng = np.random.default_rng(T)
    lyr = layer(rng, look_ahead=1)
    assert san_m_block(Tensor(rng.normal(size=(T, 8))), lyr).shape == (T, 8)


@pytest.mark.parametrize("source", ["values", "heads"])
def test_san_m_block_gradient(source):
    rng = np.random.default_rng(7)
    lyr = layer(rng, look_back=3, look_ahead=1, source=source)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 8)))

    def loss():
        return (san_m_block(x, lyr) * w).sum()

    lyr.zero_grad()
    x.grad = None
    loss().backward()
    for name, p in [("x", x)] + list(lyr.named_parameters()):
        num = numeric_grad(lambda: loss().item(), p.data)
        assert rel_err(p.grad, num) < 1e-4, name


def test_block_causal_mask_examples():
    np.testing.assert_array_equal(block_causal_mask(2, 1), [[True, False], [True, True]])
    m = block_causal_mask(4, 2)
    assert m[:2, :2].all() and not m[:2, 2:].any() and m[2:].all()
    assert block_causal_mask(5, 9).all()
    with pytest.raises(ValueError):
        block_causal_mask(0, 1)


def stream_layer(lyr, x, c):
    cache = LayerKVCache()
    outs = []
    for k, i in enumerate(range(0, len(x), c)):
        out, cache = lc_attend_chunk(Tensor(x[i : i + c]), cache, lyr, k)
        outs.append(out.data)
    return np.concatenate(outs), cache


@pytest.mark.parametrize("source", ["values", "heads"])
@pytest.mark.parametrize("T,c", [(10, 3), (9, 3), (7, 1), (12, 5), (4, 9)])
def test_chunked_equals_block_causal_batch(source, T, c):
    rng = np.random.default_rng(T * 31 + c)
    lyr = layer(rng, look_back=5, source=source)
    x = rng.normal(size=(T, 8))
    batch = san_m_block(Tensor(x), lyr, block_causal_mask(T, c)).data
    streamed, cache = stream_layer(lyr, x, c)
    assert np.abs(batch - streamed).max() < 1e-10
    assert cache.rows == T


def test_first_chunk_equals_offline_block():
    rng = np.random.default_rng(8)
    lyr = layer(rng)
    x = rng.normal(size=(5, 8))
    out, _ = lc_attend_chunk(Tensor(x), LayerKVCache(), lyr, 0)
    np.testing.assert_allclose(out.data, san_m_block(Tensor(x), lyr).data, atol=1e-12)


def test_cache_rows_and_append_only():
    rng = np.random.default_rng(9)
    lyr = layer(rng)
    cache = LayerKVCache()
    x = rng.normal(size=(15, 8))
    snapshots = []
    for k in range(3):
        lc_attend_chunk(Tensor(x[5 * k : 5 * k + 5]), cache, lyr, k)
        snapshots.append(cache.keys.copy())
    assert cache.rows == 15 and cache.head_keys(0).shape == (15, 4)
    assert cache.chunk_sizes == [5, 5, 5]
    for k, snap in enumerate(snapshots):
        np.testing.assert_array_equal(cache.keys[:, :, : snap.shape[2]], snap)


def test_chunk_out_of_order_is_rejected():
    rng = np.random.default_rng(10)
    lyr = layer(rng)
    with pytest.raises(RuntimeError):
        lc_attend_chunk(Tensor(rng.normal(size=(3, 8))), LayerKVCache(), lyr, 1)


def test_chunked_requires_unidirectional_memory():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError):
        lc_attend_chunk(Tensor(rng.normal(size=(3, 8))), LayerKVCache(), layer(rng, look_ahead=1))


def test_future_chunks_do_not_change_past_outputs():
    rng = np.random.default_rng(12)
    lyr = layer(rng, look_back=6)
    x = rng.normal(size=(12, 8))
    base, _ = stream_layer(lyr, x, 4)
    y = x.copy()
    y[8:] += rng.normal(size=(4, 8)) * 10
    pert, _ = stream_layer(lyr, y, 4)
    np.testing.assert_array_equal(base[:8], pert[:8])
    batch_a = san_m_block(Tensor(x), lyr, block_causal_mask(12, 4)).data
    batch_b = san_m_block(Tensor(y), lyr, block_causal_mask(12, 4)).data
    np.testing.assert_array_equal(batch_a[:8], batch_b[:8])


def test_mask_to_bias():
    b = mask_to_bias(np.array([[True, False]]))
    assert b[0, 0] == 0 and b[0, 1] == -np.inf
