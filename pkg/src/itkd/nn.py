"""Small layer helpers on top of the autodiff engine."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Parameter, ops
from .autodiff.tensor import Tensor


class Conv:
    """A 1x1 or 3x3 convolution with bias, He-initialized from ``rng``."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, bias_init: float = 0.0, gain: float = 2.0):
        std = math.sqrt(gain / (c_in * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)), f"{name}/w")
        self.bias = Parameter(np.full(c_out, float(bias_init)), f"{name}/b")
        self.stride = stride
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def set_identity(self) -> None:
        """Copy the first min(c_in, c_out) channels through; zero everything else (1x1 only)."""
        if self.k != 1:
            raise ValueError("identity init needs a 1x1 kernel")
        w = np.zeros_like(self.weight.data)
        for i in range(min(self.c_in, self.c_out)):
            w[i, i, 0, 0] = 1.0
        self.weight.data = w
        self.bias.data = np.zeros_like(self.bias.data)


def pointwise(x: Tensor, conv: Conv) -> Tensor:
    """Apply a 1x1 conv to an (L, C) sequence, treating rows as pixels."""
    if conv.k != 1:
        raise ValueError("pointwise needs a 1x1 kernel")
    w = ops.reshape(conv.weight, (conv.c_out, conv.c_in))
    return ops.bias_add(ops.matmul(x, ops.transpose2d(w)), conv.bias, axis=1)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    return ops.mean(ops.abs(ops.sub(a, b)))


def to_rows(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N*H*W, C)."""
    n, c, h, w = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 3, 1)), (n * h * w, c))
