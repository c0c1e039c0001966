"""Parameter containers and small layer building blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor


class Parameter(Tensor):
    """A named trainable tensor; ``grad`` accumulates during backward."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Minimal parameter-tree container with hierarchical naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_names(self, prefix: str = "") -> None:
        """Stamp hierarchical names onto every parameter."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise ConfigError(f"checkpoint missing tensor {name!r}")
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype)
        extra = set(state) - set(own)
        if extra:
            raise ConfigError(f"checkpoint has unknown tensor {sorted(extra)[0]!r}")


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._list = list(modules)
        for i, m in enumerate(self._list):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def __len__(self):
        return len(self._list)


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan = cin * kernel * kernel
        w = np.zeros((cout, cin, kernel, kernel)) if zero_init else \
            _kaiming(rng, (cout, cin, kernel, kernel), fan)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        w = np.zeros((dout, din)) if zero_init else _kaiming(rng, (dout, din), din)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ChannelLayerNorm(Module):
    """Layer normalization across the channel axis of a [B,C,H,W] map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm_channels(x, self.gamma, self.beta, self.eps)


class DepthwiseConv3x3(Module):
    """3x3 depthwise convolution, composed from padded slices."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.channels = channels
        self.weight = Parameter(_kaiming(rng, (channels, 3, 3), 9))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"depthwise conv expects {self.channels} channels, got {x.shape[1]}")
        B, C, H, W = x.shape
        xp = ad.pad2d(x, 1)
        out = None
        for i in range(3):
            for j in range(3):
                tap = ad.mul(xp[:, :, i:i + H, j:j + W],
                             ad.reshape(self.weight[:, i, j], (1, C, 1, 1)))
                out = tap if out is None else ad.add(out, tap)
        return ad.add(out, ad.reshape(self.bias, (1, C, 1, 1)))
