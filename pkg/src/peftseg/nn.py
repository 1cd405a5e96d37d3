"""Minimal parameter-holding layers shared by the backbone, neck, and decoders.

Layers expose ``named_parameters(prefix)`` yielding ``(name, Tensor)`` pairs;
freeze policies, optimizers, and checkpoints all operate on those flat names.
Running statistics of batch norm are buffers, not parameters, and are
serialized separately.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, functional as F

Params = Iterator[tuple[str, Tensor]]


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear:
    """y = x @ W^T + b with weight shape (d_out, d_in)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float = 0.02):
        self.weight = param(rng, (d_out, d_in), std)
        self.bias = zeros_param((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = param(rng, (c_out, c_in, kernel, kernel), std)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class ConvTranspose2d:
    """Kernel shape (c_in, c_out, k, k), matching the adjoint of Conv2d."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = param(rng, (c_in, c_out, kernel, kernel), std)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, output_size=None) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding, output_size=output_size)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class BatchNorm2d:
    """Batch norm over (B, H, W) per channel with running-stat buffers."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            batch_mean = x.data.mean(axis=(0, 2, 3))
            batch_var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(np.float32)
        return F.batch_norm2d(x, self.gamma, self.beta,
                              Tensor(self.running_mean), Tensor(self.running_var),
                              training=training, eps=self.eps)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var
