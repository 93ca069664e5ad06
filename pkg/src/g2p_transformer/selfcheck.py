"""Numerical self-check suite: gradient checks for every kernel, attention
and mask invariants, and the edit-distance oracle."""

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import layers, model, tensor, training
from .evaluation import levenshtein

TOLERANCE = 1e-4
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_error: float | None = None
    detail: str = ""
    seconds: float = 0.0


def _weighted_sum(out, weight):
    """Scalar probe ``sum(out * weight)`` and its gradient w.r.t. ``out``."""
    return float(np.sum(out * weight)), weight


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(F64)


def _grad_linear(rng):
    inputs = {"x": _rand(rng, 2, 3, 4), "w": _rand(rng, 4, 5), "b": _rand(rng, 5)}
    weight = _rand(rng, 2, 3, 5)

    def f(p):
        y, _ = tensor.linear(p["x"], p["w"], p["b"])
        val, dy = _weighted_sum(y, weight)
        dx, dw, db = tensor.linear_backward(dy, p["x"], p["w"])
        return val, {"x": dx, "w": dw, "b": db}

    return inputs, f


def _grad_relu(rng):
    x = _rand(rng, 3, 5)
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    weight = _rand(rng, 3, 5)

    def f(p):
        y, c = tensor.relu(p["x"])
        val, dy = _weighted_sum(y, weight)
        return val, {"x": tensor.relu_backward(dy, c)}

    return {"x": x}, f


def _grad_layer_norm(rng):
    inputs = {"x": _rand(rng, 2, 3, 5), "gamma": _rand(rng, 5), "beta": _rand(rng, 5)}
    weight = _rand(rng, 2, 3, 5)

    def f(p):
        y, c = tensor.layer_norm(p["x"], p["gamma"], p["beta"])
        val, dy = _weighted_sum(y, weight)
        dx, dg, db = tensor.layer_norm_backward(dy, c)
        return val, {"x": dx, "gamma": dg, "beta": db}

    return inputs, f


def _grad_softmax(rng):
    weight = _rand(rng, 4, 5)

    def f(p):
        y = tensor.softmax_rows(p["x"])
        val, dy = _weighted_sum(y, weight)
        return val, {"x": tensor.softmax_backward(dy, y)}

    return {"x": _rand(rng, 4, 5)}, f


def _grad_cross_entropy(rng):
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)

    def f(p):
        loss, dlogits = training.cross_entropy_loss(p["logits"], targets, mask)
        return loss, {"logits": dlogits}

    return {"logits": _rand(rng, 2, 4, 5)}, f


def _grad_dropout(rng):
    # fixed mask: the backward must route gradients through the same mask
    mask = (rng.random((3, 4)) >= 0.3).astype(F64) / 0.7
    weight = _rand(rng, 3, 4)

    def f(p):
        val, dy = _weighted_sum(p["x"] * mask, weight)
        return val, {"x": tensor.dropout_backward(dy, mask)}

    return {"x": _rand(rng, 3, 4)}, f


def _grad_attention(rng):
    inputs = {"q": _rand(rng, 2, 3, 4), "k": _rand(rng, 2, 5, 4), "v": _rand(rng, 2, 5, 4)}
    mask = np.zeros((2, 3, 5))
    mask[0, :, 4] = tensor.MASK_VALUE
    weight = _rand(rng, 2, 3, 4)

    def f(p):
        out, c = layers.scaled_dot_product_attention(p["q"], p["k"], p["v"], mask)
        val, dy = _weighted_sum(out, weight)
        dq, dk, dv = layers.scaled_dot_product_attention_backward(dy, c)
        return val, {"q": dq, "k": dk, "v": dv}

    return inputs, f


def _block_params(rng, prefix_shapes):
    return {name: _rand(rng, *shape) * 0.5 for name, shape in prefix_shapes}


def _grad_mha(rng):
    d = 4
    params = _block_params(rng, model._attention_shapes("a.", d))
    params["xq"] = _rand(rng, 2, 3, d)
    params["xkv"] = _rand(rng, 2, 5, d)
    mask = layers.padding_mask(np.array([[1, 4, 4, 2, 0], [1, 3, 2, 0, 0]]), dtype=F64)
    weight = _rand(rng, 2, 3, d)

    def f(p):
        out, c = layers.multi_head_attention(p, "a.", p["xq"], p["xkv"], mask, heads=2)
        val, dy = _weighted_sum(out, weight)
        grads = {}
        grads["xq"], grads["xkv"] = layers.multi_head_attention_backward(dy, p, "a.", c, grads)
        return val, grads

    return params, f


def _grad_ffn(rng):
    d = 4
    params = _block_params(rng, model._ffn_shapes("f.", d, 5))
    params["x"] = _rand(rng, 2, 3, d)
    weight = _rand(rng, 2, 3, d)

    def f(p):
        out, c = layers.feed_forward(p, "f.", p["x"])
        val, dy = _weighted_sum(out, weight)
        grads = {}
        grads["x"] = layers.feed_forward_backward(dy, p, "f.", c, grads)
        return val, grads

    return params, f


def _small_config(n=1, d=4, heads=2, d_ff=5):
    return model.ModelConfig(n_enc_blocks=n, n_dec_blocks=n, d_m=d, d_ff=d_ff, heads=heads,
                             dropout=0.0, max_len=6, grapheme_vocab_size=7,
                             phoneme_vocab_size=6)


def _grad_encoder_block(rng):
    cfg = _small_config()
    full = model.build_model(cfg, int(rng.integers(1 << 30)), F64)
    params = {k: v for k, v in full.items() if k.startswith("enc.0.")}
    params["x"] = _rand(rng, 2, 4, cfg.d_m)
    mask = layers.padding_mask(np.array([[1, 3, 2, 0], [1, 5, 6, 2]]), dtype=F64)
    weight = _rand(rng, 2, 4, cfg.d_m)

    def f(p):
        out, c = layers.encoder_block(p["x"], p, "enc.0.", mask, cfg.heads)
        val, dy = _weighted_sum(out, weight)
        grads = {}
        grads["x"] = layers.encoder_block_backward(dy, p, "enc.0.", c, grads)
        return val, grads

    return params, f


def _grad_decoder_block(rng):
    cfg = _small_config()
    full = model.build_model(cfg, int(rng.integers(1 << 30)), F64)
    params = {k: v for k, v in full.items() if k.startswith("dec.0.")}
    params["y"] = _rand(rng, 2, 3, cfg.d_m)
    params["enc"] = _rand(rng, 2, 4, cfg.d_m)
    self_mask = layers.causal_mask(3, dtype=F64)
    cross_mask = layers.padding_mask(np.array([[1, 3, 2, 0], [1, 5, 6, 2]]), dtype=F64)
    weight = _rand(rng, 2, 3, cfg.d_m)

    def f(p):
        out, c = layers.decoder_block(p["y"], p["enc"], p, "dec.0.", self_mask, cross_mask,
                                      cfg.heads)
        val, dy = _weighted_sum(out, weight)
        grads = {}
        grads["y"], grads["enc"] = layers.decoder_block_backward(dy, p, "dec.0.", c, grads)
        return val, grads

    return params, f


def full_model_loss(params, cfg, src, dec_in, targets, mask):
    logits, cache = model.forward(params, cfg, src, dec_in)
    loss, dlogits = training.cross_entropy_loss(logits, targets, mask)
    return loss, model.backward(dlogits, params, cfg, cache)


def _grad_full_model(rng):
    cfg = _small_config(n=1, d=8, heads=2, d_ff=12)
    params = model.build_model(cfg, int(rng.integers(1 << 30)), F64)
    src = np.array([[1, 3, 4, 2, 0], [1, 5, 2, 0, 0]])
    dec_in = np.array([[1, 3, 4, 0], [1, 5, 0, 0]])
    targets = np.array([[3, 4, 2, 0], [5, 2, 0, 0]])
    mask = targets != 0

    def f(p):
        return full_model_loss(p, cfg, src, dec_in, targets, mask)

    return params, f


GRADIENT_CHECKS = {
    "linear": _grad_linear,
    "relu": _grad_relu,
    "layer_norm": _grad_layer_norm,
    "softmax": _grad_softmax,
    "cross_entropy": _grad_cross_entropy,
    "dropout": _grad_dropout,
    "scaled_dot_product_attention": _grad_attention,
    "multi_head_attention": _grad_mha,
    "feed_forward": _grad_ffn,
    "encoder_block": _grad_encoder_block,
    "decoder_block": _grad_decoder_block,
    "full_model_1x1": _grad_full_model,
}


def run_gradient_check(name, seed=0, tol=TOLERANCE):
    started = time.perf_counter()
    rng = tensor.make_rng(seed)
    inputs, f = GRADIENT_CHECKS[name](rng)
    try:
        err, per_input = tensor.grad_check(f, inputs, rng=rng)
    except (tensor.NumericError, FloatingPointError) as exc:
        return CheckResult(name, False, None, str(exc), time.perf_counter() - started)
    worst = max(per_input, key=per_input.get) if per_input else ""
    return CheckResult(name, bool(err < tol), float(err), f"worst input {worst}",
                       time.perf_counter() - started)


# -- architecture invariants ---------------------------------------------------

def causal_invariance(cfg, seed=0):
    """Max change of logits at positions <= t when decoder inputs after t change."""
    rng = tensor.make_rng(seed)
    params = model.build_model(cfg, seed, F64)
    b, ts, tt = 2, cfg.max_len - 1, cfg.max_len - 1
    src = rng.integers(3, cfg.grapheme_vocab_size, size=(b, ts))
    dec = rng.integers(3, cfg.phoneme_vocab_size, size=(b, tt))
    base, _ = model.forward(params, cfg, src, dec)
    worst = 0.0
    for t in range(tt - 1):
        other = dec.copy()
        other[:, t + 1:] = rng.integers(3, cfg.phoneme_vocab_size, size=(b, tt - t - 1))
        out, _ = model.forward(params, cfg, src, other)
        worst = max(worst, float(np.abs(out[:, :t + 1] - base[:, :t + 1]).max()))
    return worst


def padding_invariance(cfg, seed=0):
    """Max change of encoder outputs at real positions when pad embeddings change."""
    rng = tensor.make_rng(seed)
    params = model.build_model(cfg, seed, F64)
    src = np.zeros((2, cfg.max_len), dtype=np.int64)
    src[0, :4] = [1, 3, 4, 2]
    src[1, :6] = [1, 5, 6, 3, 4, 2]
    enc, _, _ = model.encode(params, cfg, src)
    other = dict(params)
    emb = params["src_embedding"].copy()
    emb[0] = rng.standard_normal(cfg.d_m) * 10
    other["src_embedding"] = emb
    enc2, _, _ = model.encode(other, cfg, src)
    real = src != 0
    return float(np.abs(enc[real] - enc2[real]).max())


def attention_row_stochastic(seed=0):
    """Max deviation of attention rows from summing to one, with masks applied."""
    rng = tensor.make_rng(seed)
    q, k, v = (rng.standard_normal((2, 2, 5, 4)) for _ in range(3))
    mask = layers.causal_mask(5, dtype=F64)[:, None] + layers.padding_mask(
        np.array([[1, 3, 4, 2, 0], [1, 2, 0, 0, 0]]), dtype=F64)[:, None]
    _, cache = layers.scaled_dot_product_attention(q, k, v, mask)
    return float(np.abs(cache[3].sum(axis=-1) - 1).max())


# -- edit distance oracle ----------------------------------------------------------

def _neighbours(seq, alphabet):
    seq = tuple(seq)
    out = set()
    for i in range(len(seq)):
        out.add(seq[:i] + seq[i + 1:])
        for a in alphabet:
            if a != seq[i]:
                out.add(seq[:i] + (a,) + seq[i + 1:])
    for i in range(len(seq) + 1):
        for a in alphabet:
            out.add(seq[:i] + (a,) + seq[i:])
    return out


def _balls(seq, alphabet, depth):
    balls = [{tuple(seq)}]
    seen = set(balls[0])
    for _ in range(depth):
        nxt = set()
        for s in balls[-1]:
            nxt |= _neighbours(s, alphabet)
        nxt -= seen
        seen |= nxt
        balls.append(nxt)
    return balls


def brute_force_distance(a, b, max_depth=4):
    """Edit distance by enumerating every edit script of up to ``max_depth``
    single-token edits (meeting in the middle). Returns None beyond that."""
    alphabet = sorted(set(a) | set(b))
    half = (max_depth + 1) // 2
    from_a = _balls(a, alphabet, half)
    from_b = _balls(b, alphabet, max_depth - half)
    for total in range(max_depth + 1):
        for i in range(total + 1):
            j = total - i
            if i < len(from_a) and j < len(from_b) and from_a[i] & from_b[j]:
                return total
    return None


def random_sequence_pairs(n, seed=0, max_len=8, alphabet="abc"):
    """Half independent random pairs, half pairs a few edits apart."""
    rng = tensor.make_rng(seed)
    pairs = []
    for k in range(n):
        a = [alphabet[i] for i in rng.integers(0, len(alphabet), size=rng.integers(0, max_len + 1))]
        if k % 2:
            b = [alphabet[i] for i in rng.integers(0, len(alphabet), size=rng.integers(0, max_len + 1))]
        else:
            b = list(a)
            for _ in range(rng.integers(0, 5)):
                op = rng.integers(0, 3)
                if op == 0 and len(b) < max_len:
                    b.insert(int(rng.integers(0, len(b) + 1)), alphabet[rng.integers(len(alphabet))])
                elif op == 1 and b:
                    del b[int(rng.integers(0, len(b)))]
                elif b:
                    b[int(rng.integers(0, len(b)))] = alphabet[rng.integers(len(alphabet))]
        pairs.append((a, b))
    return pairs


def edit_distance_oracle(n=1000, seed=0):
    """Number of pairs where ``levenshtein`` disagrees with the enumerator."""
    mismatches = 0
    for a, b in random_sequence_pairs(n, seed):
        dist, ops = levenshtein(a, b)
        oracle = brute_force_distance(a, b)
        if oracle is None:
            ok = dist > 4
        else:
            ok = dist == oracle
        ok = ok and ops.substitutions + ops.insertions + ops.deletions == dist
        mismatches += not ok
    return mismatches


def invariant_checks():
    results = []
    for n, d in itertools.product((1, 2), (8, 32)):
        cfg = model.ModelConfig(n_enc_blocks=n, n_dec_blocks=n, d_m=d, d_ff=2 * d, heads=2,
                                dropout=0.0, max_len=8, grapheme_vocab_size=9,
                                phoneme_vocab_size=10)
        c = causal_invariance(cfg, seed=n * 100 + d)
        results.append(CheckResult(f"causal_mask N={n} d_m={d}", c == 0.0, c))
        p = padding_invariance(cfg, seed=n * 100 + d)
        results.append(CheckResult(f"padding_mask N={n} d_m={d}", p < 1e-5, p))
    r = attention_row_stochastic()
    results.append(CheckResult("attention_rows_sum_to_one", r < 1e-6, r))
    m = edit_distance_oracle()
    results.append(CheckResult("levenshtein_vs_enumeration", m == 0, None,
                               f"{m} mismatches in 1000 pairs"))
    return results


def run_selfcheck(checks=None):
    """Run every gradient check plus the invariants; returns a list of results."""
    names = checks if checks is not None else list(GRADIENT_CHECKS)
    results = [run_gradient_check(name) for name in names]
    results += invariant_checks()
    return results
