"""Differentiable primitives used by the neural process and the MLP baseline.

Tensors follow a channels-last convention: image-like inputs are
``(N, H, W, C)`` and linear weights are stored as ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    add,
    as_tensor,
    clamp,
    concatenate,
    exp,
    matmul,
    mul,
    relu,
    reshape,
    square,
    sub,
    tmean,
    tsum,
    transpose,
)

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


def _check(cond: bool, kind: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{kind}: {msg}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    _check(weight.ndim == 2, "linear", f"weight must be 2-d, got {weight.shape}")
    _check(x.shape[-1] == weight.shape[0], "linear",
           f"input feature dim {x.shape[-1]} != weight fan_in {weight.shape[0]}")
    out = matmul(x, weight)
    if bias is not None:
        _check(bias.shape == (weight.shape[1],), "linear",
               f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = add(out, bias)
    return out


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    mean_g = g_hat.mean(axis=axes, keepdims=True)
    mean_gx = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - mean_g - x_hat * mean_gx)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis. Constant rows map to ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    _check(gain.shape == (d,) and bias.shape == (d,), "layer-norm",
           f"gain/bias shapes {gain.shape}/{bias.shape} != ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).astype(x.dtype)
    out_data = x_hat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def _bw(g):
        if gain.requires_grad:
            gain._accumulate((g * x_hat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            x._accumulate(_normalize_backward(g * gain.data, x_hat, inv_std, -1).astype(x.dtype))

    return _make(out_data, (x, gain, bias), _bw)


def batch_norm2d(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Per-channel normalization of an ``(N, H, W, C)`` batch.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as is customary); evaluation
    mode normalizes with the running buffers.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _check(x.ndim == 4, "batch-norm-2d", f"expected (N, H, W, C) input, got {x.shape}")
    c = x.shape[-1]
    _check(gain.shape == (c,) and bias.shape == (c,), "batch-norm-2d",
           f"gain/bias shapes {gain.shape}/{bias.shape} != ({c},)")
    axes = (0, 1, 2)
    if training:
        _check(x.shape[0] >= 2, "batch-norm-2d", f"training mode needs batch size >= 2, got {x.shape[0]}")
        mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = x.shape[0] * x.shape[1] * x.shape[2]
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean.reshape(c)
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var.reshape(c) * count / (count - 1)
    else:
        centered = x.data - running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).astype(x.dtype)
    out_data = x_hat * gain.data + bias.data

    def _bw(g):
        if gain.requires_grad:
            gain._accumulate((g * x_hat).sum(axis=axes))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            g_hat = g * gain.data
            if training:
                dx = _normalize_backward(g_hat, x_hat, inv_std, axes)
            else:
                dx = g_hat * inv_std
            x._accumulate(dx.astype(x.dtype))

    return _make(out_data, (x, gain, bias), _bw)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    ``weight`` has shape ``(3, 3, C_in, C_out)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check(x.ndim == 4, "conv2d-3x3", f"expected (N, H, W, C) input, got {x.shape}")
    _check(weight.ndim == 4 and weight.shape[:2] == (3, 3), "conv2d-3x3",
           f"kernel must be (3, 3, C_in, C_out), got {weight.shape}")
    n, h, w, c_in = x.shape
    _check(weight.shape[2] == c_in, "conv2d-3x3", f"input channels {c_in} != kernel C_in {weight.shape[2]}")
    c_out = weight.shape[3]
    _check(bias.shape == (c_out,), "conv2d-3x3", f"bias shape {bias.shape} != ({c_out},)")

    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([padded[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(n * h * w, 9 * c_in)
    kernel = weight.data.reshape(9 * c_in, c_out)
    out_data = (cols @ kernel + bias.data).reshape(n, h, w, c_out)

    def _bw(g):
        g2 = g.reshape(-1, c_out)
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kernel.T).reshape(n, h, w, 9, c_in)
            dpad = np.zeros_like(padded)
            for k in range(9):
                i, j = divmod(k, 3)
                dpad[:, i:i + h, j:j + w, :] += dcols[:, :, :, k, :]
            x._accumulate(dpad[:, 1:-1, 1:-1, :])

    return _make(out_data, (x, weight, bias), _bw)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average over the spatial axes: ``(N, H, W, C) -> (N, C)``."""
    _check(x.ndim == 4, "adaptive-average-pool", f"expected (N, H, W, C) input, got {x.shape}")
    return tmean(x, axis=(1, 2))


def mean_pool(x: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    _check(x.shape[axis] >= 1, "mean-pool", f"cannot pool an empty axis of shape {x.shape}")
    return tmean(x, axis=axis, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


def gaussian_nll(y, mu: Tensor, log_var: Tensor) -> Tensor:
    """Elementwise ``0.5 * (log_var + (y - mu)**2 / exp(log_var))``."""
    y, mu, log_var = as_tensor(y, dtype=mu.dtype), as_tensor(mu), as_tensor(log_var)
    _check(y.shape == mu.shape == log_var.shape, "gaussian-nll",
           f"shapes y={y.shape}, mu={mu.shape}, log_var={log_var.shape} differ")
    resid2 = square(sub(y, mu))
    return mul(add(log_var, mul(resid2, exp(mul(log_var, -1.0)))), 0.5)


def kl_diag_gaussians(q_mu: Tensor, q_log_sigma: Tensor, p_mu: Tensor, p_log_sigma: Tensor) -> Tensor:
    """KL(q || p) for diagonal Gaussians parameterized by log standard deviations, summed."""
    shapes = {t.shape for t in (q_mu, q_log_sigma, p_mu, p_log_sigma)}
    _check(len(shapes) == 1, "kl", f"mismatched shapes {shapes}")
    q_var = exp(mul(q_log_sigma, 2.0))
    inv_p_var = exp(mul(p_log_sigma, -2.0))
    ratio = mul(add(q_var, square(sub(q_mu, p_mu))), inv_p_var)
    per_dim = add(sub(p_log_sigma, q_log_sigma), sub(mul(ratio, 0.5), 0.5))
    return tsum(per_dim)


def reparameterize(mu: Tensor, log_sigma: Tensor, noise) -> Tensor:
    noise = as_tensor(noise, dtype=mu.dtype)
    _check(mu.shape == log_sigma.shape == noise.shape, "reparameterize",
           f"shapes mu={mu.shape}, log_sigma={log_sigma.shape}, noise={noise.shape} differ")
    return add(mu, mul(exp(log_sigma), noise))


def multihead_cross_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    heads: int,
    weights: Mapping[str, Tensor],
    return_heads: bool = False,
):
    """Scaled dot-product cross-attention of ``M`` queries over ``N`` context rows.

    ``weights`` holds the projections ``q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b``.
    With ``return_heads`` the concatenated per-head payload (before the output
    projection) is returned alongside the projected output.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if keys.shape[0] == 0 or values.shape[0] == 0:
        raise ShapeError("attention: empty context set (need at least one key/value row)")
    _check(keys.shape[0] == values.shape[0], "attention",
           f"{keys.shape[0]} keys but {values.shape[0]} values")
    d_model = weights["q_w"].shape[1]
    _check(d_model % heads == 0, "attention", f"model dim {d_model} not divisible by {heads} heads")
    d_head = d_model // heads
    m, n = queries.shape[0], keys.shape[0]

    q = linear(queries, weights["q_w"], weights["q_b"])
    k = linear(keys, weights["k_w"], weights["k_b"])
    v = linear(values, weights["v_w"], weights["v_b"])
    q = transpose(reshape(q, (m, heads, d_head)), (1, 0, 2))
    k = transpose(reshape(k, (n, heads, d_head)), (1, 2, 0))
    v = transpose(reshape(v, (n, heads, d_head)), (1, 0, 2))

    logits = mul(matmul(q, k), 1.0 / math.sqrt(d_head))
    attn = softmax(logits, axis=-1)
    payload = reshape(transpose(matmul(attn, v), (1, 0, 2)), (m, d_model))
    out = linear(payload, weights["o_w"], weights["o_b"])
    if return_heads:
        return out, payload
    return out


_PRIMITIVES = {
    "linear": lambda inputs, params, **kw: linear(inputs[0], *params),
    "relu": lambda inputs, params, **kw: relu(inputs[0]),
    "layer-norm": lambda inputs, params, **kw: layer_norm(inputs[0], *params),
    "batch-norm-2d": lambda inputs, params, **kw: batch_norm2d(inputs[0], *params, **kw),
    "conv2d-3x3": lambda inputs, params, **kw: conv2d_3x3(inputs[0], *params),
    "adaptive-average-pool": lambda inputs, params, **kw: adaptive_avg_pool(inputs[0]),
    "softmax": lambda inputs, params, **kw: softmax(inputs[0], **kw),
    "mean-pool": lambda inputs, params, **kw: mean_pool(inputs[0], **kw),
    "concatenate": lambda inputs, params, **kw: concatenate(inputs, **kw),
    "add": lambda inputs, params, **kw: add(*inputs),
    "multiply": lambda inputs, params, **kw: mul(*inputs),
    "clamp": lambda inputs, params, **kw: clamp(inputs[0], **kw),
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def apply_primitive(kind: str, inputs, params=(), **options) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("clamp", [x], lo=-1, hi=1)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {PRIMITIVE_KINDS}") from None
    if kind in ("add", "multiply"):
        _check(len(inputs) == 2, kind, f"expected 2 inputs, got {len(inputs)}")
        a, b = inputs
        _check(np.shape(getattr(a, "data", a)) == np.shape(getattr(b, "data", b)), kind,
               f"operand shapes {np.shape(getattr(a, 'data', a))} and {np.shape(getattr(b, 'data', b))} differ")
    return fn(list(inputs), list(params), **options)
