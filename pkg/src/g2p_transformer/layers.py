"""Transformer building blocks: positional encoding, masks, attention,
feed-forward and the post-norm encoder/decoder blocks.

Parameters live in a flat ``dict`` keyed by dotted names; each block
function receives that dict plus the key prefix of its block. Backward
functions accumulate into a gradient dict with the same keys.
"""

import numpy as np

from .tensor import (
    MASK_VALUE,
    DimensionError,
    dropout,
    dropout_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax_backward,
    softmax_rows,
)

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
FFN_KEYS = ("w1", "b1", "w2", "b2")
LN_KEYS = ("gamma", "beta")


def positional_encoding(max_len, d_m, dtype=np.float32):
    if d_m % 2:
        raise ValueError(f"d_m must be even, got {d_m}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_m, 2, dtype=np.float64) / d_m)
    pe = np.zeros((max_len, d_m))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe.astype(dtype)


def padding_mask(ids, pad_id=0, dtype=np.float32):
    """Additive mask of shape (B, 1, T) blocking keys at pad positions."""
    ids = np.asarray(ids)
    return np.where(ids == pad_id, MASK_VALUE, 0.0).astype(dtype)[:, None, :]


def causal_mask(length, dtype=np.float32):
    """Additive mask of shape (1, T, T) blocking keys after the query."""
    blocked = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(blocked, MASK_VALUE, 0.0).astype(dtype)[None]


def _add_zero(grads, key, value):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def scaled_dot_product_attention(q, k, v, mask=None):
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    probs = softmax_rows(scores)
    out = np.matmul(probs, v)
    return out, (q, k, v, probs, scale)


def scaled_dot_product_attention_backward(dout, cache):
    q, k, v, probs, scale = cache
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dprobs = np.matmul(dout, np.swapaxes(v, -1, -2))
    dscores = softmax_backward(dprobs, probs) * scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q)
    return dq, dk, dv


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def multi_head_attention(p, prefix, xq, xkv, mask, heads):
    """Project, split into heads, attend, concatenate, project.

    ``xq`` is (B, Tq, d_m), ``xkv`` is (B, Tk, d_m); ``mask`` is additive and
    broadcastable to (B, Tq, Tk). The returned cache carries the attention
    probabilities under ``"probs"`` with shape (B, heads, Tq, Tk).
    """
    d_m = p[prefix + "wq"].shape[0]
    if xq.shape[-1] != d_m or xkv.shape[-1] != d_m:
        raise DimensionError(f"inputs {xq.shape}, {xkv.shape} do not match d_m={d_m}")
    if d_m % heads:
        raise DimensionError(f"d_m={d_m} not divisible by heads={heads}")
    q, _ = linear(xq, p[prefix + "wq"], p[prefix + "bq"])
    k, _ = linear(xkv, p[prefix + "wk"], p[prefix + "bk"])
    v, _ = linear(xkv, p[prefix + "wv"], p[prefix + "bv"])
    head_mask = None if mask is None else mask[:, None]
    ctx, attn_cache = scaled_dot_product_attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), head_mask
    )
    merged = _merge_heads(ctx)
    out, _ = linear(merged, p[prefix + "wo"], p[prefix + "bo"])
    cache = {
        "xq": xq, "xkv": xkv, "merged": merged, "attn": attn_cache,
        "heads": heads, "probs": attn_cache[3],
    }
    return out, cache


def multi_head_attention_backward(dout, p, prefix, cache, grads):
    """Returns ``(dxq, dxkv)``."""
    heads = cache["heads"]
    dmerged, dwo, dbo = linear_backward(dout, cache["merged"], p[prefix + "wo"])
    b, tq, d = dmerged.shape
    dctx = dmerged.reshape(b, tq, heads, d // heads).transpose(0, 2, 1, 3)
    dqh, dkh, dvh = scaled_dot_product_attention_backward(dctx, cache["attn"])
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    dxq, dwq, dbq = linear_backward(dq, cache["xq"], p[prefix + "wq"])
    dxk, dwk, dbk = linear_backward(dk, cache["xkv"], p[prefix + "wk"])
    # a key bias shifts every score of a query row equally; softmax ignores it
    dbk = np.zeros_like(dbk)
    dxv, dwv, dbv = linear_backward(dv, cache["xkv"], p[prefix + "wv"])
    for key, g in zip(ATTENTION_KEYS, (dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)):
        _add_zero(grads, prefix + key, g)
    return dxq, dxk + dxv


def feed_forward(p, prefix, x):
    h, _ = linear(x, p[prefix + "w1"], p[prefix + "b1"])
    a, _ = relu(h)
    y, _ = linear(a, p[prefix + "w2"], p[prefix + "b2"])
    return y, (x, h, a)


def feed_forward_backward(dy, p, prefix, cache, grads):
    x, h, a = cache
    da, dw2, db2 = linear_backward(dy, a, p[prefix + "w2"])
    dh = relu_backward(da, h)
    dx, dw1, db1 = linear_backward(dh, x, p[prefix + "w1"])
    for key, g in zip(FFN_KEYS, (dw1, db1, dw2, db2)):
        _add_zero(grads, prefix + key, g)
    return dx


def _norm(p, prefix, x):
    return layer_norm(x, p[prefix + "gamma"], p[prefix + "beta"])


def _norm_backward(dy, prefix, cache, grads):
    dx, dgamma, dbeta = layer_norm_backward(dy, cache)
    _add_zero(grads, prefix + "gamma", dgamma)
    _add_zero(grads, prefix + "beta", dbeta)
    return dx


def encoder_block(x, p, prefix, mask, heads, rate=0.0, train=False, rng=None):
    a, attn = multi_head_attention(p, prefix + "self_attn.", x, x, mask, heads)
    a, m1 = dropout(a, rate, train, rng)
    h1, ln1 = _norm(p, prefix + "ln1.", x + a)
    f, ffn = feed_forward(p, prefix + "ffn.", h1)
    f, m2 = dropout(f, rate, train, rng)
    out, ln2 = _norm(p, prefix + "ln2.", h1 + f)
    return out, dict(attn=attn, m1=m1, ln1=ln1, ffn=ffn, m2=m2, ln2=ln2)


def encoder_block_backward(dout, p, prefix, cache, grads):
    dz2 = _norm_backward(dout, prefix + "ln2.", cache["ln2"], grads)
    df = dropout_backward(dz2, cache["m2"])
    dh1 = dz2 + feed_forward_backward(df, p, prefix + "ffn.", cache["ffn"], grads)
    dz1 = _norm_backward(dh1, prefix + "ln1.", cache["ln1"], grads)
    da = dropout_backward(dz1, cache["m1"])
    dxq, dxkv = multi_head_attention_backward(da, p, prefix + "self_attn.", cache["attn"], grads)
    return dz1 + dxq + dxkv


def decoder_block(y, enc_out, p, prefix, self_mask, cross_mask, heads,
                  rate=0.0, train=False, rng=None):
    a, self_attn = multi_head_attention(p, prefix + "self_attn.", y, y, self_mask, heads)
    a, m1 = dropout(a, rate, train, rng)
    h1, ln1 = _norm(p, prefix + "ln1.", y + a)
    c, cross_attn = multi_head_attention(
        p, prefix + "cross_attn.", h1, enc_out, cross_mask, heads
    )
    c, m2 = dropout(c, rate, train, rng)
    h2, ln2 = _norm(p, prefix + "ln2.", h1 + c)
    f, ffn = feed_forward(p, prefix + "ffn.", h2)
    f, m3 = dropout(f, rate, train, rng)
    out, ln3 = _norm(p, prefix + "ln3.", h2 + f)
    cache = dict(self_attn=self_attn, m1=m1, ln1=ln1, cross_attn=cross_attn, m2=m2,
                 ln2=ln2, ffn=ffn, m3=m3, ln3=ln3)
    return out, cache


def decoder_block_backward(dout, p, prefix, cache, grads):
    """Returns ``(dy, d_enc_out)``."""
    dz3 = _norm_backward(dout, prefix + "ln3.", cache["ln3"], grads)
    df = dropout_backward(dz3, cache["m3"])
    dh2 = dz3 + feed_forward_backward(df, p, prefix + "ffn.", cache["ffn"], grads)
    dz2 = _norm_backward(dh2, prefix + "ln2.", cache["ln2"], grads)
    dc = dropout_backward(dz2, cache["m2"])
    dh1_q, denc = multi_head_attention_backward(
        dc, p, prefix + "cross_attn.", cache["cross_attn"], grads
    )
    dh1 = dz2 + dh1_q
    dz1 = _norm_backward(dh1, prefix + "ln1.", cache["ln1"], grads)
    da = dropout_backward(dz1, cache["m1"])
    dyq, dykv = multi_head_attention_backward(da, p, prefix + "self_attn.", cache["self_attn"], grads)
    return dz1 + dyq + dykv, denc
