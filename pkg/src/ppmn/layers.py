"""Thin parameter-owning wrappers around the autodiff ops."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, conv2d, fully_connected
from .params import ParamStore, glorot_uniform


class Conv:
    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, k: int,
                 rng: np.random.Generator, *, rate: int = 1, stride: int = 1, pad: int = 0):
        if rate < 1:
            raise ValueError(f"{name}: dilation rate must be >= 1")
        self.name = name
        self.weight = store.add(Parameter(f"{name}.weight", glorot_uniform(rng, (out_ch, in_ch, k, k))))
        self.bias = store.add(Parameter(f"{name}.bias", np.zeros(out_ch)))
        self.rate, self.stride, self.pad = rate, stride, pad
        self.kernel = k

    @property
    def field_of_view(self) -> int:
        return (self.kernel - 1) * self.rate + 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, rate=self.rate, stride=self.stride, pad=self.pad)


class Dense:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.name = name
        self.weight = store.add(Parameter(f"{name}.weight", glorot_uniform(rng, (out_dim, in_dim))))
        self.bias = store.add(Parameter(f"{name}.bias", np.zeros(out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
