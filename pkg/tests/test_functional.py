import numpy as np
import pytest

from minimm import functional as F
from minimm.errors import ConfigError, ShapeError, StructureError
from minimm.gradcheck import check_gradients
from minimm.nn import Attention, Parameter
from minimm.tensor import PackedSequence, Tensor


# -- oracles ----------------------------------------------------------------


def softmax_oracle(x, axis=-1):
    """Direct exp/sum evaluation (no shift)."""
    e = np.exp(np.asarray(x, dtype=np.float64))
    return e / e.sum(axis=axis, keepdims=True)


def attention_loop_oracle(q, k, v, causal=False):
    """Naive O(n^2) per-query attention."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        limit = i + 1 if causal else n
        logits = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(limit)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(limit))
    return out


def padded_attention_oracle(items, attn: Attention):
    """Plain-numpy padded-batch attention using the same projection weights."""
    w = attn.qkv.w.data
    b = attn.qkv.b.data
    pw, pb = attn.proj.w.data, attn.proj.b.data
    heads, hd = attn.heads, attn.head_dim
    outs = []
    maxlen = max(it.shape[0] for it in items)
    for it in items:
        n = it.shape[0]
        x = np.zeros((maxlen, it.shape[1]), dtype=it.dtype)
        x[:n] = it
        qkv = x @ w + b
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q.reshape(maxlen, heads, hd).transpose(1, 0, 2)
        k = k.reshape(maxlen, heads, hd).transpose(1, 0, 2)
        v = v.reshape(maxlen, heads, hd).transpose(1, 0, 2)
        logits = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
        logits[:, :, n:] = -1e9  # padded keys masked out
        wts = np.exp(logits - logits.max(axis=-1, keepdims=True))
        wts /= wts.sum(axis=-1, keepdims=True)
        y = (wts @ v).transpose(1, 0, 2).reshape(maxlen, heads * hd)
        outs.append((y @ pw + pb)[:n])
    return outs


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    out = F.softmax(Tensor([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5])
    out4 = F.softmax(Tensor([3.7, 3.7, 3.7, 3.7])).data
    assert np.allclose(out4, 0.25)


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    ours = F.softmax(Tensor(x, dtype=np.float64)).data
    assert np.abs(ours - softmax_oracle(x)).max() < 1e-12


def test_softmax_rows_sum_to_one_extreme_logits(rng):
    x = rng.uniform(-1e4, 1e4, size=(32, 16)).astype(np.float32)
    out = F.softmax(Tensor(x), axis=-1).data
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6
    assert np.isfinite(out).all()


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((4, 5))
    a = F.softmax(Tensor(x, dtype=np.float64)).data
    b = F.softmax(Tensor(x + 123.0, dtype=np.float64)).data
    assert np.abs(a - b).max() < 1e-12


def test_softmax_log_softmax_grads(rng):
    x = Parameter(rng.standard_normal((3, 5)).astype(np.float64))
    w = Tensor(rng.standard_normal((3, 5)).astype(np.float64))
    check_gradients(lambda: (F.softmax(x, axis=-1) * w).sum(), [x], tol=1e-6)
    check_gradients(lambda: (F.log_softmax(x, axis=-1) * w).sum(), [x], tol=1e-6)


# -- attention ------------------------------------------------------------------


def test_attention_single_token_returns_v():
    q = Tensor(np.random.default_rng(1).standard_normal((1, 8)))
    k = Tensor(np.random.default_rng(2).standard_normal((1, 8)))
    v = Tensor(np.random.default_rng(3).standard_normal((1, 8)))
    out = F.attention(q, k, v).data
    assert np.allclose(out, v.data, atol=1e-7)


def test_attention_identical_keys_mean_pool(rng):
    k_row = rng.standard_normal(8)
    k = Tensor(np.tile(k_row, (5, 1)))
    v = Tensor(rng.standard_normal((5, 8)))
    q = Tensor(rng.standard_normal((2, 8)))
    out = F.attention(q, k, v).data
    assert np.allclose(out, v.data.mean(axis=0), atol=1e-6)


def test_attention_causal_matches_loop_oracle(rng):
    q = rng.standard_normal((3, 6))
    k = rng.standard_normal((3, 6))
    v = rng.standard_normal((3, 6))
    ours = F.attention(Tensor(q), Tensor(k), Tensor(v), mask="causal").data
    ref = attention_loop_oracle(q, k, v, causal=True)
    assert np.abs(ours - ref).max() < 1e-6


def test_attention_head_dim_mismatch():
    q = Tensor(np.zeros((2, 4)))
    k = Tensor(np.zeros((2, 6)))
    with pytest.raises(ShapeError):
        F.attention(q, k, Tensor(np.zeros((2, 6))))


def test_attention_gradcheck(rng):
    q = Parameter(rng.standard_normal((4, 6)).astype(np.float64))
    k = Parameter(rng.standard_normal((4, 6)).astype(np.float64))
    v = Parameter(rng.standard_normal((4, 6)).astype(np.float64))
    check_gradients(lambda: (F.attention(q, k, v, mask="causal") ** 2).sum(), [q, k, v])


# -- rope -------------------------------------------------------------------------


def test_rope_position_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((5, 8)))
    out = F.rope_1d(x, np.zeros(5)).data
    assert np.array_equal(out, x.data)
    out2 = F.rope_2d(x, np.zeros(5), np.zeros(5)).data
    assert np.array_equal(out2, x.data)


def test_rope_preserves_norm(rng):
    x = Tensor(rng.standard_normal((7, 16)).astype(np.float64))
    pos = np.arange(7) * 3.0
    for out in (F.rope_1d(x, pos), F.rope_2d(x, pos, pos[::-1])):
        assert np.abs(
            np.linalg.norm(out.data, axis=-1) - np.linalg.norm(x.data, axis=-1)
        ).max() < 1e-6


def test_rope_relative_position_property(rng):
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)
    for shift in (1, 5, 11):
        dots = []
        for m, n in [(2, 7), (2 + shift, 7 + shift)]:
            qr = F.rope_1d(Tensor(q[None, :], dtype=np.float64), np.array([m])).data[0]
            kr = F.rope_1d(Tensor(k[None, :], dtype=np.float64), np.array([n])).data[0]
            dots.append(qr @ kr)
        assert abs(dots[0] - dots[1]) < 1e-6


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        F.rope_1d(Tensor(np.zeros((2, 5))), np.arange(2))
    with pytest.raises(ConfigError):
        F.rope_2d(Tensor(np.zeros((2, 6))), np.arange(2), np.arange(2))


def test_rope_gradcheck(rng):
    x = Parameter(rng.standard_normal((3, 8)).astype(np.float64))
    pos = np.arange(3)
    check_gradients(lambda: (F.rope_2d(x, pos, pos * 2) ** 2).sum(), [x], tol=1e-6)


# -- packed attention ---------------------------------------------------------------


def make_attn(dim=16, heads=2, seed=0, dtype=np.float64):
    return Attention(dim, heads, np.random.default_rng(seed), dtype=dtype)


def test_packed_single_item_equals_unpacked(rng):
    attn = make_attn()
    x = Tensor(rng.standard_normal((6, 16)))
    packed = F.packed_attention(PackedSequence(x, [6]), attn)
    solo = attn(x)
    assert np.array_equal(packed.data.data, solo.data)


def test_packed_two_items_match_padded_oracle(rng):
    attn = make_attn()
    a = rng.standard_normal((3, 16))
    b = rng.standard_normal((5, 16))
    seq = PackedSequence(Tensor(np.concatenate([a, b])), [3, 5])
    out = F.packed_attention(seq, attn)
    ref = padded_attention_oracle([a, b], attn)
    assert np.abs(out.item(0).data - ref[0]).max() < 1e-5
    assert np.abs(out.item(1).data - ref[1]).max() < 1e-5


def test_packed_permutation_equivariance(rng):
    attn = make_attn()
    items = [rng.standard_normal((n, 16)) for n in (2, 4, 3)]
    fwd = F.packed_attention(PackedSequence(Tensor(np.concatenate(items)), [2, 4, 3]), attn)
    rev = F.packed_attention(
        PackedSequence(Tensor(np.concatenate(items[::-1])), [3, 4, 2]), attn
    )
    for i in range(3):
        assert np.array_equal(fwd.item(i).data, rev.item(2 - i).data)


def test_packed_random_mixes_property(rng):
    attn = make_attn(dim=8, heads=2, seed=3)
    for trial in range(20):
        n_items = int(rng.integers(1, 9))
        lens = [int(rng.integers(1, 33)) for _ in range(n_items)]
        items = [rng.standard_normal((n, 8)) for n in lens]
        seq = PackedSequence(Tensor(np.concatenate(items)), lens)
        out = F.packed_attention(seq, attn)
        ref = padded_attention_oracle(items, attn)
        for i in range(n_items):
            assert np.abs(out.item(i).data - ref[i]).max() < 1e-5


# -- conv / upsample -----------------------------------------------------------------


def conv2d_loop_oracle(x, w, b, stride, padding):
    bs, c, h, ww = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((bs, oc, oh, ow))
    for n in range(bs):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        ours = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        ref = conv2d_loop_oracle(x, w, b, stride, pad)
        assert np.abs(ours - ref).max() < 1e-5


def test_conv2d_gradcheck(rng):
    x = Parameter(rng.standard_normal((1, 2, 5, 5)).astype(np.float64))
    w = Parameter(rng.standard_normal((3, 2, 3, 3)).astype(np.float64))
    b = Parameter(rng.standard_normal(3).astype(np.float64))
    check_gradients(lambda: (F.conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), [x, w, b])


def test_upsample2x(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    up = F.upsample2x(Tensor(x)).data
    assert up.shape == (1, 2, 6, 6)
    assert np.array_equal(up[:, :, ::2, ::2], x)
    assert np.array_equal(up[:, :, 1::2, 1::2], x)
    xp = Parameter(x.astype(np.float64))
    check_gradients(lambda: (F.upsample2x(xp) ** 2).sum(), [xp], tol=1e-6)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((4, 512)))
    loss = F.cross_entropy(logits, np.array([1, 2, 3, 4]))
    assert abs(loss.item() - np.log(512)) < 1e-5
