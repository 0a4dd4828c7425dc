"""Minimal parameter-holding module system on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def normal_param(rng: np.random.Generator, shape, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Base class that walks its attributes to find parameters.

    Attribute insertion order fixes the parameter order, which keeps
    checkpoints and optimizer traversal deterministic.
    """

    def named_params(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_params(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{key}.{i}.")

    def params(self):
        return [p for _, p in self.named_params()]

    def param_dict(self):
        return dict(self.named_params())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True, std=0.02):
        self.weight = normal_param(rng, (in_features, out_features), std)
        self.bias = zeros_param((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-6):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
