"""Minimal layer/parameter containers on top of the tensor ops."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters are Tensor attributes with requires_grad; submodules nest."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """3x3 conv (padding 1, stride 1 or 2, optional groups) or a 1x1 projection.

    The 1x1 case is computed as a per-pixel linear map (matmul over the
    flattened spatial axis) rather than a kernel sweep.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype=np.float32,
        kernel_size: int = 3,
        stride: int = 1,
        groups: int = 1,
        bias_init: float = 0.0,
    ):
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        if kernel_size == 1 and (stride != 1 or groups != 1):
            raise ValueError("1x1 projection supports stride=1, groups=1 only")
        self.kernel_size = kernel_size
        self.stride = stride
        self.groups = groups
        if kernel_size == 3:
            fan_in = (in_channels // groups) * 9
            shape = (out_channels, in_channels // groups, 3, 3)
        else:
            fan_in = in_channels
            shape = (out_channels, in_channels)
        self.weight = Tensor(kaiming_uniform(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.full(out_channels, bias_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kernel_size == 3:
            return T.conv2d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)
        c, h, w = x.shape
        flat = T.reshape(x, (c, h * w))
        out = T.add(T.matmul(self.weight, flat), T.reshape(self.bias, (self.bias.shape[0], 1)))
        return T.reshape(out, (self.weight.shape[0], h, w))


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype=np.float32,
        bias_init: float = 0.0,
    ):
        self.weight = Tensor(
            kaiming_uniform(rng, (out_features, in_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.full(out_features, bias_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvRelu(Module):
    def __init__(self, in_channels, out_channels, rng, dtype=np.float32, stride=1):
        self.conv = Conv2d(in_channels, out_channels, rng, dtype, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.conv(x))
