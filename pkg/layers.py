"""
Parameter containers and the small layer set the network is assembled from
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

import tensor_core as tc
from errors import ContractError
from tensor_core import Tensor


def parameter(values) -> Tensor:
    """A trainable float32 leaf"""
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class: parameters are Tensor attributes with requires_grad, submodules nest"""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ContractError(
                    f"load_state_dict: missing {missing[:5]}, unexpected {unexpected[:5]}"
                )
        for name, p in own.items():
            if name not in state:
                continue
            values = np.asarray(state[name])
            if values.shape != p.shape:
                raise ContractError(f"load_state_dict: {name} has shape {values.shape}, expected {p.shape}")
            p.data = values.astype(p.data.dtype).copy()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)"""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    """y = x W + b over the last axis"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = uniform(rng, (in_features, out_features), bound)
        self.bias = uniform(rng, (out_features,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = tc.LAYER_NORM_EPS):
        self.weight = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.weight, self.bias, self._eps)


class Conv2d(Module):
    """Channels-last 2D convolution"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        self.weight = uniform(rng, (kernel_size, kernel_size, in_channels, out_channels), bound)
        self.bias = uniform(rng, (out_channels,), bound) if bias else None
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class DepthwiseConv2d(Module):
    """Same-padded per-channel 2D convolution"""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        bound = 1.0 / kernel_size
        self.weight = uniform(rng, (kernel_size, kernel_size, channels), bound)
        self.bias = uniform(rng, (channels,), bound)
        self._padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return tc.depthwise_conv2d(x, self.weight, self.bias, self._padding)


class CausalConv1d(Module):
    """Per-channel causal convolution along the sequence axis of [B,L,C]"""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(kernel_size)
        self.weight = uniform(rng, (kernel_size, channels), bound)
        self.bias = uniform(rng, (channels,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return tc.causal_conv1d(x, self.weight, self.bias)


def zero_parameters(module: Module) -> Module:
    """Set every parameter of a module to zero (used by identity-reduction checks)"""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module
