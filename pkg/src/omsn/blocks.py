"""ResNeSt residual blocks with split attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import ops
from .engine.layers import BatchNormParams, ConvBNReLU, ConvParams, Linear, Module
from .engine.ops import ShapeError
from .engine.tensor import Tensor


@dataclass(frozen=True)
class SplitAttentionConfig:
    cardinality: int = 1
    radix: int = 2
    channels: int = 64
    inter_channels: Optional[int] = None

    def __post_init__(self):
        if self.cardinality < 1 or self.radix < 1 or self.channels < 1:
            raise ValueError("cardinality, radix and channels must be positive")
        if self.channels % self.cardinality:
            raise ValueError(f"channels {self.channels} not divisible by cardinality {self.cardinality}")
        if self.inter_channels is not None and self.inter_channels < 1:
            raise ValueError("inter_channels must be >= 1")

    @property
    def group_width(self) -> int:
        return self.channels // self.cardinality

    @property
    def bottleneck(self) -> int:
        if self.inter_channels is not None:
            return self.inter_channels
        return max(self.channels // 4, 8)


class SplitAttention(Module):
    """Fuse ``radix`` same-shape feature maps with per-channel softmax weights."""

    def __init__(self, group_width: int, radix: int, inter_channels: int,
                 rng: Optional[np.random.Generator] = None):
        self.radix = radix
        self.group_width = group_width
        self.fc1 = Linear(group_width, inter_channels, rng=rng)
        self.bn = BatchNormParams(inter_channels)
        self.fc2 = Linear(inter_channels, radix * group_width, rng=rng)

    def weights(self, feats: Sequence[Tensor]) -> Tensor:
        """Attention weights, shape (B, radix, group_width); sums to 1 over radix."""
        if len(feats) == 0:
            raise ValueError("split attention needs at least one radix feature map")
        if len(feats) != self.radix:
            raise ShapeError(f"expected {self.radix} radix maps, got {len(feats)}")
        shape = feats[0].shape
        for f in feats:
            if f.shape != shape:
                raise ShapeError(f"radix maps differ in shape: {f.shape} vs {shape}")
        if shape[1] != self.group_width:
            raise ShapeError(f"radix maps have {shape[1]} channels, expected {self.group_width}")
        fused = feats[0]
        for f in feats[1:]:
            fused = ops.add(fused, f)
        s = ops.global_avg_pool(fused)
        z = ops.relu(self.bn(self.fc1(s)))
        logits = ops.reshape(self.fc2(z), (shape[0], self.radix, self.group_width))
        return ops.softmax(logits, axis=1)

    def __call__(self, feats: Sequence[Tensor]) -> Tensor:
        omega = self.weights(feats)
        out = None
        for a, f in enumerate(feats):
            term = ops.scale_channels(f, omega[:, a])
            out = term if out is None else ops.add(out, term)
        return out


def split_attention(radix_features: Sequence[Tensor], params: SplitAttention) -> Tensor:
    return params(radix_features)


class Radix(Module):
    """1x1 conv-BN-ReLU then 3x3 conv-BN-ReLU; the 3x3 carries the stride."""

    def __init__(self, in_channels: int, width: int, stride: int,
                 rng: Optional[np.random.Generator] = None):
        self.reduce = ConvBNReLU(in_channels, width, kernel_size=1, rng=rng)
        self.conv = ConvBNReLU(width, width, kernel_size=3, stride=stride, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(self.reduce(x))


class Cardinal(Module):
    def __init__(self, in_channels: int, cfg: SplitAttentionConfig, stride: int,
                 rng: Optional[np.random.Generator] = None):
        self.radices = [Radix(in_channels, cfg.group_width, stride, rng=rng)
                        for _ in range(cfg.radix)]
        self.attention = SplitAttention(cfg.group_width, cfg.radix, cfg.bottleneck, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.attention([r(x) for r in self.radices])


class Shortcut(Module):
    """Ceil-mode average pool (when strided) followed by 1x1 conv + BN."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: Optional[np.random.Generator] = None):
        self.stride = stride
        self.conv = ConvParams(in_channels, out_channels, 1, bias=False, rng=rng)
        self.bn = BatchNormParams(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        if self.stride > 1:
            x = ops.avg_pool(x, self.stride, self.stride, ceil_mode=True)
        return self.bn(self.conv(x))


class ResNeStBlock(Module):
    """Residual block ``ReLU(F([U_1..U_k]) + T(x))``."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 cardinality: int = 1, radix: int = 2, width: Optional[int] = None,
                 inter_channels: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = SplitAttentionConfig(cardinality, radix, width or out_channels, inter_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.cardinals = [Cardinal(in_channels, self.cfg, stride, rng=rng)
                          for _ in range(cardinality)]
        self.project = ConvParams(self.cfg.channels, out_channels, 1, bias=False, rng=rng)
        self.project_bn = BatchNormParams(out_channels)
        if stride == 1 and in_channels == out_channels:
            self.shortcut = None
        else:
            self.shortcut = Shortcut(in_channels, out_channels, stride, rng=rng)

    def residual(self, x: Tensor) -> Tensor:
        return x if self.shortcut is None else self.shortcut(x)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"block expects (B, {self.in_channels}, H, W), got {x.shape}")
        us = [c(x) for c in self.cardinals]
        u = us[0] if len(us) == 1 else ops.concat_channels(us)
        main = self.project_bn(self.project(u))
        skip = self.residual(x)
        if main.shape != skip.shape:
            raise ShapeError(f"residual branch {skip.shape} does not match main branch {main.shape}")
        return ops.relu(ops.add(main, skip))


ResNeStBlockParams = ResNeStBlock


def resnest_block(x: Tensor, params: ResNeStBlock) -> Tensor:
    return params(x)


class ResNeStStage(Module):
    """Sequential blocks; only the first carries the stage stride."""

    def __init__(self, in_channels: int, out_channels: int, num_blocks: int = 1,
                 stride: int = 2, cardinality: int = 1, radix: int = 2,
                 rng: Optional[np.random.Generator] = None):
        if num_blocks < 1:
            raise ValueError("a stage needs at least one block")
        self.blocks = [
            ResNeStBlock(in_channels if i == 0 else out_channels, out_channels,
                         stride if i == 0 else 1, cardinality, radix, rng=rng)
            for i in range(num_blocks)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def resnest_stage(x: Tensor, blocks: Sequence[ResNeStBlock]) -> Tensor:
    for b in blocks:
        x = b(x)
    return x
