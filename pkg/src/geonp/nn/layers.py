"""Parameterized layers that register their weights in a :class:`ParamStore`."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .params import ParamStore
from .tensor import Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = store.add(f"{name}.weight", _uniform(rng, d_in, (d_in, d_out)))
        self.bias = store.add(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gain = store.add(f"{name}.gain", np.ones(channels))
        self.bias = store.add(f"{name}.bias", np.zeros(channels))
        self.running_mean = store.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
        self.running_var = store.add(f"{name}.running_var", np.ones(channels), trainable=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batch_norm2d(x, self.gain, self.bias, self.running_mean, self.running_var, training)


class Conv3x3:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = store.add(f"{name}.weight", _uniform(rng, 9 * c_in, (3, 3, c_in, c_out)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d_3x3(x, self.weight, self.bias)


class MultiheadCrossAttention:
    def __init__(self, store: ParamStore, name: str, d_query: int, d_key: int, d_model: int,
                 heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.weights = {}
        for proj, d_in in (("q", d_query), ("k", d_key), ("v", d_key), ("o", d_model)):
            self.weights[f"{proj}_w"] = store.add(f"{name}.{proj}.weight", _uniform(rng, d_in, (d_in, d_model)))
            self.weights[f"{proj}_b"] = store.add(f"{name}.{proj}.bias", np.zeros(d_model))

    def __call__(self, queries: Tensor, context: Tensor, return_heads: bool = False):
        return F.multihead_cross_attention(queries, context, context, self.heads, self.weights,
                                           return_heads=return_heads)
