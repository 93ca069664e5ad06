"""Dense kernels with hand-written backward passes.

Every kernel here works on plain numpy arrays. Forward functions return the
output together with a small cache; the matching ``*_backward`` consumes the
upstream gradient and that cache. Arrays keep whatever float dtype they come
in with, so the same code runs in float32 for training and float64 for
gradient checks.
"""

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64
MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-5
PRNG_ALGORITHM = "numpy.PCG64"
ROUNDOFF_ULPS = 64


class NumericError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class DimensionError(ValueError):
    pass


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng, n=2):
    """Derive ``n`` independent child generators from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b):
    """Matrix product with a readable error on shape mismatch.

    Leading axes are treated as batch axes, as in ``np.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x):
    x = np.asarray(x)
    check_finite(x, "softmax input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, y):
    # y is the softmax output
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def linear(x, w, b):
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"cannot multiply shapes {x.shape} and {w.shape}")
    lead = x.shape[:-1]
    y = x.reshape(-1, w.shape[0]) @ w + b
    return y.reshape(*lead, w.shape[1]), x


def linear_backward(dy, x, w):
    flat_x = x.reshape(-1, w.shape[0])
    flat_dy = dy.reshape(-1, w.shape[1])
    dw = flat_x.T @ flat_dy
    db = flat_dy.sum(axis=0)
    dx = (flat_dy @ w.T).reshape(x.shape)
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dy, x):
    return dy * (x > 0)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gamma + beta, (x_hat, inv_std, gamma)


def layer_norm_backward(dy, cache):
    x_hat, inv_std, gamma = cache
    d = x_hat.shape[-1]
    lead_axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * x_hat).sum(axis=lead_axes)
    dbeta = dy.sum(axis=lead_axes)
    dx_hat = dy * gamma
    dx = inv_std / d * (
        d * dx_hat
        - dx_hat.sum(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def dropout(x, rate, train, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def grad_check(f, inputs, step=1e-5, max_checks=None, rng=None):
    """Compare analytic gradients against central finite differences.

    ``f(inputs)`` must return ``(value, grads)`` where ``grads`` maps the same
    keys as ``inputs``. Inputs are perturbed in place and restored. With
    ``max_checks`` set, at most that many randomly chosen entries per input
    are probed. Returns ``(max_rel_error, per_input_errors)``.

    An analytic gradient of exactly zero is accepted when the two perturbed
    values differ only by float roundoff, since central differences cannot
    resolve anything smaller.
    """
    _, analytic = f(inputs)
    rng = rng if rng is not None else make_rng(0)
    per_input = {}
    for name, arr in inputs.items():
        if arr.dtype != CHECK_DTYPE:
            raise TypeError(f"grad_check needs float64 inputs, {name} is {arr.dtype}")
        g = np.asarray(analytic[name])
        check_finite(g, f"analytic gradient of {name}")
        n = arr.size
        idx = np.arange(n)
        if max_checks is not None and n > max_checks:
            idx = rng.choice(n, size=max_checks, replace=False)
        flat = arr.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = float(f(inputs)[0])
            flat[i] = orig - step
            minus = float(f(inputs)[0])
            flat[i] = orig
            fd = (plus - minus) / (2 * step)
            if not np.isfinite(fd):
                raise NumericError(f"non-finite numeric gradient for {name}")
            ga = g.reshape(-1)[i]
            roundoff = ROUNDOFF_ULPS * np.finfo(CHECK_DTYPE).eps * max(abs(plus), abs(minus))
            if ga == 0.0 and abs(plus - minus) <= roundoff:
                continue
            err = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            worst = max(worst, err)
        per_input[name] = worst
    return max(per_input.values(), default=0.0), per_input
