"""Stateless differentiable operations built on the tensor engine."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import MASK_VALUE, PackedSequence, Tensor, concat, matmul


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax; rows along ``axis`` sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), bw)


def _stable_sigmoid(arr: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), bw)


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return Tensor._from_op(out, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add gradient into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return Tensor._from_op(np.ascontiguousarray(out), (table,), bw)


def select_index(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick x[i, ids[i]] for each row i of a 2-d tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, ids]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, ids] = g
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    picked = select_index(log_softmax(logits, axis=-1), targets)
    return -picked.mean()


# -- rotary position embeddings ------------------------------------------------


def _rope_cos_sin(positions, n_pairs: int, dtype, base: float):
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(n_pairs, dtype=np.float64) / n_pairs)
    ang = positions[..., None] * inv_freq
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _apply_rotation(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return Tensor._from_op(out, (x,), bw)


def rope_1d(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs by position-dependent angles.

    ``positions`` broadcasts against x's leading axes (typically one entry per
    token). Norm-preserving; position 0 is the identity.
    """
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ConfigError(f"rope_1d needs an even feature dim, got {dim}")
    cos, sin = _rope_cos_sin(positions, dim // 2, x.dtype, base)
    return _apply_rotation(x, cos, sin)


def rope_axes(x: Tensor, positions_per_axis, pairs_per_axis=None, base: float = 10000.0) -> Tensor:
    """Multi-axis rotary embedding: feature pairs are partitioned across axes."""
    dim = x.shape[-1]
    n_axes = len(positions_per_axis)
    total_pairs = dim // 2
    if dim % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even feature dim, got {dim}")
    if pairs_per_axis is None:
        if total_pairs % n_axes != 0:
            raise ConfigError(f"feature dim {dim} not divisible across {n_axes} rope axes")
        pairs_per_axis = [total_pairs // n_axes] * n_axes
    if sum(pairs_per_axis) != total_pairs:
        raise ConfigError("pairs_per_axis must cover the full feature dim")
    cos_parts, sin_parts = [], []
    for pos, n_pairs in zip(positions_per_axis, pairs_per_axis):
        c, s = _rope_cos_sin(pos, n_pairs, x.dtype, base)
        cos_parts.append(c)
        sin_parts.append(s)
    shapes = [c.shape[:-1] for c in cos_parts]
    lead = np.broadcast_shapes(*shapes)
    cos = np.concatenate([np.broadcast_to(c, lead + c.shape[-1:]) for c in cos_parts], axis=-1)
    sin = np.concatenate([np.broadcast_to(s, lead + s.shape[-1:]) for s in sin_parts], axis=-1)
    return _apply_rotation(x, cos, sin)


def rope_2d(x: Tensor, row_positions, col_positions, base: float = 10000.0) -> Tensor:
    """2-d rotary embedding: half the pairs rotate by row, half by column."""
    dim = x.shape[-1]
    if dim % 4 != 0:
        raise ConfigError(f"rope_2d needs a feature dim divisible by 4, got {dim}")
    return rope_axes(x, [row_positions, col_positions], base=base)


# -- attention ----------------------------------------------------------------


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive mask hiding future positions."""
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v with an optional pre-softmax additive mask.

    q, k, v are [..., tokens, head_dim]; leading axes (batch, heads) broadcast.
    ``mask`` is None, the string "causal", or an additive numpy array.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeError(
            f"attention head dims disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value token counts disagree: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * scale
    if mask is not None:
        if isinstance(mask, str):
            if mask != "causal":
                raise ContractError(f"unknown mask kind {mask!r}")
            mask = causal_mask(q.shape[-2], dtype=q.dtype)
        logits = logits + Tensor(np.asarray(mask, dtype=q.dtype))
    return matmul(softmax(logits, axis=-1), v)


def packed_attention(seq: PackedSequence, weights, ropes=None) -> PackedSequence:
    """Attention applied item by item; results never mix across items.

    ``weights`` must expose ``project_qkv(tokens) -> (q, k, v)`` with shapes
    [heads, n, head_dim] and ``merge_heads(out) -> [n, dim]`` — the surface of
    :class:`minimm.nn.Attention`. ``ropes``, when given, holds one positional
    rotation callable per item, applied to that item's queries and keys.
    """
    if ropes is not None and len(ropes) != len(seq):
        raise StructureError("one rope callable per packed item is required")
    outs = []
    for i, item in enumerate(seq.items()):
        if item.shape[0] == 0:
            outs.append(item)
            continue
        q, k, v = weights.project_qkv(item)
        if ropes is not None and ropes[i] is not None:
            q, k = ropes[i](q), ropes[i](k)
        outs.append(weights.merge_heads(attention(q, k, v)))
    return PackedSequence(concat(outs, axis=0), seq.lengths)


# -- convolution ----------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (NCHW), im2col forward with a scatter-add backward."""
    bs, c, h, ww = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, OH, OW, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bs * oh * ow, c * kh * kw)
    wm = w.data.reshape(oc, -1)
    out = cols @ wm.T  # [B*OH*OW, OC]
    out = np.ascontiguousarray(
        out.reshape(bs, oh * ow, oc).transpose(0, 2, 1).reshape(bs, oc, oh, ow)
    )
    if b is not None:
        out += b.data.reshape(1, oc, 1, 1)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(bs * oh * ow, oc)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(bs, oh, ow, c, kh, kw)
            gxp = np.zeros((bs, c, h + 2 * padding, ww + 2 * padding), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += (
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            crop = gxp[:, :, padding : padding + h, padding : padding + ww] if padding else gxp
            gx = np.ascontiguousarray(crop)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsample (NCHW)."""
    bs, c, h, w = x.shape
    return (
        x.reshape(bs, c, h, 1, w, 1)
        .broadcast_to((bs, c, h, 2, w, 2))
        .reshape(bs, c, 2 * h, 2 * w)
    )


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of a [batch] array of times in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb.astype(dtype)
