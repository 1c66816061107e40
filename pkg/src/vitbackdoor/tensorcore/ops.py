"""Differentiable numpy operations with hand-written backward passes.

Every op follows the same convention::

    out, cache = op(*inputs, **options)
    grads = op_backward(dout, cache)    # tuple, one entry per differentiable input

Arrays are plain ``numpy.ndarray``; the dtype of the inputs is preserved, so the
same code runs the float32 training path and the float64 gradient checks.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError, InputError

_GELU_C = math.sqrt(2.0 / math.pi)


# ----------------------------------------------------------------------------
# dense algebra
# ----------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray):
    """Matrix product of an ``M x K`` and a ``K x N`` array."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, (a, b)


def matmul_backward(dout, cache):
    a, b = cache
    return dout @ b.T, a.T @ dout


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """Affine map over the last axis: ``x @ w + b`` for ``x`` of shape ``(..., K)``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    k, n = w.shape
    x2 = x.reshape(-1, k)
    d2 = dout.reshape(-1, n)
    dx = dout @ w.T
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


# ----------------------------------------------------------------------------
# convolution / pooling
# ----------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: np.ndarray, k: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, pad: int = 0):
    """2-D cross-correlation with zero padding.

    ``x`` is ``(N, C, H, W)`` or a single ``(C, H, W)`` image; ``k`` is
    ``(F, C, kh, kw)``. Output spatial size is
    ``floor((H + 2*pad - kh) / stride) + 1``.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than padded input {x.shape} (pad={pad})")
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be >= 1")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # windows: (N, C, H', W', kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,fcij->nfhw", win, k, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    if single:
        out = out[0]
    return out, (xp.shape, win, k, stride, pad, single, bias is not None)


def conv2d_backward(dout, cache):
    xp_shape, win, k, stride, pad, single, has_bias = cache
    if single:
        dout = dout[None]
    _, _, ho, wo = dout.shape
    _, _, kh, kw = k.shape
    dk = np.einsum("nchwij,nfhw->fcij", win, dout, optimize=True)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                "nfhw,fc->nchw", dout, k[:, :, i, j], optimize=True
            )
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    if single:
        dxp = dxp[0]
    return dxp, dk, db


def max_pool2d(x: np.ndarray, size: int = 2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d: window {size} larger than input {x.shape}")
    xc = x[:, :, :ho * size, :wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size)
    out = blocks.max(axis=(3, 5))
    # gradient routes to the first maximum in each window
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    return out, (x.shape, arg, size)


def max_pool2d_backward(dout, cache):
    shape, arg, size = cache
    n, c, ho, wo = dout.shape
    flat = np.zeros((n, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
    blocks = flat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :ho * size, :wo * size] = blocks.reshape(n, c, ho * size, wo * size)
    return (dx,)


def global_avg_pool(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, cache):
    n, c, h, w = cache
    dx = np.broadcast_to(dout[:, :, None, None] / (h * w), cache).astype(dout.dtype)
    return (dx,)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, cache):
    return (dout * cache,)


def gelu(x: np.ndarray):
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_backward(dout, cache):
    x, x2, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
    return (dout * grad,)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ----------------------------------------------------------------------------
# normalization / attention
# ----------------------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: last dim of {x.shape} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    red = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=red)
    dbeta = dout.sum(axis=red)
    dxhat = dout * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _split_heads(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int):
    """Multi-head scaled dot-product attention on ``(L, D)`` or ``(B, L, D)`` inputs.

    Each head attends with ``softmax(Q K^T / sqrt(D / heads)) V``; head outputs are
    concatenated back to width ``D``.
    """
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must agree")
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"attention: width {d} not divisible by heads={heads}")
    single = q.ndim == 2
    if single:
        q, k, v = q[None], k[None], v[None]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(d // heads)
    probs = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale, axis=-1)
    out = _merge_heads(probs @ vh)
    if single:
        out = out[0]
    return out, (qh, kh, vh, probs, scale, heads, single)


def attention_backward(dout, cache):
    qh, kh, vh, probs, scale, heads, single = cache
    if single:
        dout = dout[None]
    dh = _split_heads(dout, heads)
    dprobs = dh @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dh
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    grads = tuple(_merge_heads(g) for g in (dqh, dkh, dvh))
    if single:
        grads = tuple(g[0] for g in grads)
    return grads


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad
