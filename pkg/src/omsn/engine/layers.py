"""Parameter containers: a minimal module tree plus conv / BN / dense layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base class for anything that owns parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain ``np.ndarray`` attributes (e.g. BN running statistics). Submodules
    may be attributes or lists of modules. Attribute insertion order fixes
    the enumeration order, which keeps archives and RNG use deterministic.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in self.named_parameters():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data = src.astype(p.dtype, copy=True)
        for name, buf in self.named_buffers():
            src = np.asarray(state[name])
            if src.shape != buf.shape:
                raise ValueError(f"{name}: shape {src.shape} != {buf.shape}")
            buf[...] = src

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is used by grad checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(m, name, value.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int,
                   dtype=np.float32) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class ConvParams(Module):
    """Square-kernel 2-D convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        if min(in_channels, out_channels, kernel_size) < 1 or stride < 1 or padding < 0:
            raise ValueError("ConvParams: channels/kernel/stride must be positive, padding >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = Tensor(np.zeros(out_channels, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNormParams(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if not 0.0 < momentum < 1.0 or eps <= 0:
            raise ValueError("BatchNormParams: need eps > 0 and momentum in (0, 1)")
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_fan_in(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    """conv -> BN -> ReLU, the basic unit used throughout the network."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, rng: Optional[np.random.Generator] = None):
        self.conv = ConvParams(in_channels, out_channels, kernel_size, stride,
                               padding=kernel_size // 2, bias=False, rng=rng)
        self.bn = BatchNormParams(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))
