"""The OMSN encoder-decoder: stem, ResNeSt encoder, multi-scale skip fusion, head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .blocks import ResNeStStage
from .engine import ops
from .engine.layers import BatchNormParams, ConvBNReLU, ConvParams, Module
from .engine.ops import ShapeError
from .engine.tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    scales: int = 5
    stem_channels: int = 64
    stage_channels: tuple = (128, 256, 512, 1024)
    blocks_per_stage: int = 1
    skip_channels: int = 64
    cardinality: int = 1
    radix: int = 2
    output_channels: int = 1
    input_size: int = 304
    head_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.scales < 2:
            raise ValueError("scales must be >= 2")
        if len(self.stage_channels) != self.scales - 1:
            raise ValueError(f"need {self.scales - 1} stage channel counts, got {len(self.stage_channels)}")
        if self.output_channels not in (1, 3):
            raise ValueError("output_channels must be 1 or 3")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")
        if self.input_size < 2 ** self.scales:
            raise ValueError(
                f"input_size {self.input_size} too small for {self.scales} scales "
                f"(ladder {scale_ladder(self.input_size, self.scales)})")
        if min(self.stem_channels, self.skip_channels, self.head_channels,
               self.blocks_per_stage, *self.stage_channels) < 1:
            raise ValueError("channel counts and blocks_per_stage must be positive")

    @property
    def fused_channels(self) -> int:
        return self.scales * self.skip_channels

    @property
    def encoder_channels(self) -> tuple:
        return (self.stem_channels,) + self.stage_channels

    @property
    def ladder(self) -> list:
        return scale_ladder(self.input_size, self.scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(stem_channels=16, stage_channels=(16, 32, 32, 64), skip_channels=8,
                        input_size=96),
    "gradcheck": ModelConfig(stem_channels=8, stage_channels=(8, 8, 8, 8), skip_channels=4,
                             input_size=32, head_channels=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def scale_ladder(input_size: int, scales: int) -> list:
    """Spatial extent of every encoder level, by repeated ceil-halving."""
    out, size = [], input_size
    for _ in range(scales):
        size = math.ceil(size / 2)
        out.append(size)
    return out


class SkipFusion(Module):
    """Builds decoder map X_de^i from every encoder / deeper decoder level."""

    def __init__(self, level: int, cfg: ModelConfig, rng: np.random.Generator):
        n = cfg.scales
        enc = cfg.encoder_channels
        self.level = level
        sources = []
        for k in range(1, n + 1):
            if k <= level:
                in_ch = enc[k - 1]
            elif k < n:
                in_ch = cfg.fused_channels
            else:
                in_ch = enc[n - 1]
            sources.append(ConvBNReLU(in_ch, cfg.skip_channels, 3, rng=rng))
        self.sources = sources
        self.aggregate = ConvBNReLU(cfg.fused_channels, cfg.fused_channels, 3, rng=rng)

    def source_maps(self, encoder_maps: list, decoder_maps: dict, extent: int) -> list:
        """The N per-source maps at this level, in order down, parallel, up."""
        i, n = self.level, len(encoder_maps)
        out = []
        for k in range(1, n + 1):
            if k < i:
                factor = 2 ** (i - k)
                x = ops.max_pool(encoder_maps[k - 1], factor, factor, ceil_mode=True)
            elif k == i:
                x = encoder_maps[i - 1]
            else:
                if k not in decoder_maps:
                    raise KeyError(f"skip fusion at level {i} needs decoder map of level {k}")
                x = ops.bilinear_resize(decoder_maps[k], extent, extent)
            if x.shape[2:] != (extent, extent):
                raise ShapeError(f"level {i} source {k} has extent {x.shape[2:]}, expected {extent}")
            out.append(self.sources[k - 1](x))
        return out

    def __call__(self, encoder_maps: list, decoder_maps: dict, extent: int) -> Tensor:
        return self.aggregate(ops.concat_channels(self.source_maps(encoder_maps, decoder_maps, extent)))


class Head(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.input_size = cfg.input_size
        self.refine = ConvBNReLU(cfg.fused_channels, cfg.head_channels, 3, rng=rng)
        self.classifier = ConvParams(cfg.head_channels, cfg.output_channels, 1, bias=True, rng=rng)

    def __call__(self, x_de1: Tensor) -> Tensor:
        """Logits at full input resolution."""
        up = ops.bilinear_resize(x_de1, self.input_size, self.input_size)
        return self.classifier(self.refine(up))


class OMSN(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        enc = cfg.encoder_channels
        self.stem_conv = ConvParams(1, cfg.stem_channels, 7, stride=1, padding=3, bias=False, rng=rng)
        self.stem_bn = BatchNormParams(cfg.stem_channels)
        self.stages = [
            ResNeStStage(enc[i], enc[i + 1], cfg.blocks_per_stage, stride=2,
                         cardinality=cfg.cardinality, radix=cfg.radix, rng=rng)
            for i in range(cfg.scales - 1)
        ]
        # index 0 is level N-1, the first level decoded
        self.fusions = [SkipFusion(level, cfg, rng) for level in range(cfg.scales - 1, 0, -1)]
        self.head = Head(cfg, rng)

    # ------------------------------------------------------------- pieces
    def stem(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"stem expects single-channel (B, 1, H, W) input, got {x.shape}")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} is smaller than 8x8")
        g = ops.relu(self.stem_bn(self.stem_conv(x)))
        return ops.max_pool(g, 3, 2, ceil_mode=True)

    def encode(self, x_en1: Tensor) -> list:
        maps = [x_en1]
        for stage in self.stages:
            maps.append(stage(maps[-1]))
        return maps

    def fusion(self, level: int) -> SkipFusion:
        return self.fusions[self.config.scales - 1 - level]

    def skip_fuse(self, level: int, encoder_maps: list, decoder_maps: dict) -> Tensor:
        if not 1 <= level <= self.config.scales - 1:
            raise ValueError(f"skip level must be in [1, {self.config.scales - 1}], got {level}")
        extent = encoder_maps[level - 1].shape[2]
        return self.fusion(level)(encoder_maps, decoder_maps, extent)

    def decode(self, encoder_maps: list) -> dict:
        n = self.config.scales
        dec = {n: encoder_maps[-1]}
        for level in range(n - 1, 0, -1):
            dec[level] = self.skip_fuse(level, encoder_maps, dec)
        return dec

    # ------------------------------------------------------------ forward
    def forward_logits(self, x: Tensor) -> Tensor:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ShapeError(f"model expects (B, 1, {s}, {s}) input, got {x.shape}")
        enc = self.encode(self.stem(x))
        dec = self.decode(enc)
        return self.head(dec[1])

    def forward(self, x: Tensor) -> Tensor:
        """Per-channel sigmoid probabilities, shape (B, OC, H, W)."""
        return ops.sigmoid(self.forward_logits(x))

    __call__ = forward

    def probabilities(self, x: Tensor, task: str) -> Tensor:
        """Sigmoid view for the single task, channel softmax for the multi task."""
        logits = self.forward_logits(x)
        if task == "multi":
            return ops.softmax(logits, axis=1)
        return ops.sigmoid(logits)
