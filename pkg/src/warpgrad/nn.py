"""Minimal module system and the convolutional building blocks used by the models."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Parameter, Tensor


class Module:
    """Container whose Parameters and sub-Modules are discovered from attributes.

    Parameter paths (``encoder.0.conv.weight``) are unique by construction and
    are the keys used by checkpoints.
    """

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.value.shape:
                raise ContractError(f"tensor {name}: checkpoint shape {tuple(state[name].shape)} "
                                    f"!= model shape {p.value.shape}")
            p.assign(np.array(state[name], dtype=float))

    def freeze(self) -> "Module":
        for _, p in self.named_parameters():
            p.trainable = False
            p.value.requires_grad = False
        return self

    def num_parameters(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())


def _he(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True, *, rng, gain=1.0):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter("weight", Tensor(_he(rng, (cout, cin, k, k), cin * k * k, gain)))
        self.bias = Parameter("bias", Tensor(np.zeros(cout))) if bias else None

    def __call__(self, x):
        b = self.bias.value if self.bias is not None else None
        return T.conv2d(x, self.weight.value, b, self.stride, self.padding)


class Conv1d(Module):
    def __init__(self, cin, cout, k=3, dilation=1, padding=None, bias=True, *, rng, gain=1.0):
        super().__init__()
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Parameter("weight", Tensor(_he(rng, (cout, cin, k), cin * k, gain)))
        self.bias = Parameter("bias", Tensor(np.zeros(cout))) if bias else None

    def __call__(self, x):
        b = self.bias.value if self.bias is not None else None
        return T.conv1d(x, self.weight.value, b, 1, self.padding, self.dilation)


class Linear(Module):
    def __init__(self, cin, cout, *, rng, gain=1.0):
        super().__init__()
        self.weight = Parameter("weight", Tensor(rng.normal(0.0, gain / np.sqrt(cin), (cin, cout))))
        self.bias = Parameter("bias", Tensor(np.zeros(cout)))

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight.value), self.bias.value)


class ConvBlock(Module):
    """conv -> instance norm -> leaky ReLU."""

    def __init__(self, cin, cout, k=3, stride=1, *, rng, slope=0.2):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, rng=rng)
        self.slope = slope

    def __call__(self, x):
        return T.leaky_relu(T.instance_norm(self.conv(x), eps=1e-5), self.slope)


class ResBlock(Module):
    """x + IN(conv(lrelu(IN(conv(x)))))."""

    def __init__(self, channels, *, rng, slope=0.2):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, gain=0.5)
        self.slope = slope

    def __call__(self, x):
        h = T.leaky_relu(T.instance_norm(self.conv1(x), eps=1e-5), self.slope)
        h = T.instance_norm(self.conv2(h), eps=1e-5)
        return T.add(x, h)


class UpBlock(Module):
    """x2 bilinear upsampling followed by a ConvBlock."""

    def __init__(self, cin, cout, *, rng):
        super().__init__()
        self.block = ConvBlock(cin, cout, rng=rng)

    def __call__(self, x):
        return self.block(T.bilinear_upsample(x, 2))
