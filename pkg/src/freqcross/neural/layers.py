"""Parameter-holding layers and a minimal module container."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


@dataclass
class Ctx:
    """Per-forward-pass settings threaded through every layer."""

    training: bool = False
    rng: np.random.Generator | None = None


class Module:
    """Container that discovers child modules and parameters by attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def batchnorms(self):
        for value in vars(self).values():
            if isinstance(value, BatchNorm2d):
                yield value
            elif isinstance(value, Module):
                yield from value.batchnorms()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.batchnorms()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # He init for ReLU networks: U(-b, b) with b = sqrt(6 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, name, cin, cout, kernel, rng, dtype, stride=1, padding=0, bias=False):
        fan_in = cin * kernel * kernel
        self.weight = Parameter(f"{name}.weight", kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype), decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, name, fin, fout, rng, dtype):
        self.weight = Parameter(f"{name}.weight", kaiming_uniform(rng, (fout, fin), fin, dtype), decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(fout, dtype=dtype))

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self, ctx.training)
