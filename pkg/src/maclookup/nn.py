"""Parameter containers shared by the LUT network and the enhancement blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor, get_dtype


class Module:
    """Base class whose ``named_parameters`` walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> Tensor:
    bound = scale / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(get_dtype())
    return Tensor(data, requires_grad=True)


def constant_init(shape, value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value, dtype=get_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 1,
                 stride: int = 1):
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = constant_init((c_out,))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = constant_init((channels,), 1.0)
        self.beta = constant_init((channels,), 0.0)
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = 0) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps, axis=axis)
