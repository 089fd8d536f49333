"""Turning probability maps into label maps.

Per foreground channel: Gaussian adaptive threshold, removal of small
8-connected objects, filling of small enclosed holes. Channel masks are then
merged into a single label map (FAZ over vessel over background).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

BACKGROUND, VESSEL, FAZ = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", VESSEL: "vessel", FAZ: "faz"}

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThresholdConfig:
    """Local threshold ``T = gaussian_mean + offset``; foreground iff value > T.

    ``confident`` and ``floor`` only matter in :func:`binarize_probability`:
    pixels above ``confident`` are always kept, pixels at or below ``floor``
    are always dropped, and the adaptive rule decides in between.
    """

    window: int = 11
    sigma: Optional[float] = None
    offset: float = 2.0 / 255.0
    confident: float = 0.5
    floor: float = 0.25

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def effective_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.window / 6.0


@dataclass(frozen=True)
class MorphologyConfig:
    min_object_size: int = 10
    min_hole_size: int = 10
    connectivity: int = field(default=8, init=False)

    def __post_init__(self):
        if self.min_object_size < 1 or self.min_hole_size < 1:
            raise ValueError("size thresholds must be >= 1")


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: ThresholdConfig = ThresholdConfig()
    morphology: MorphologyConfig = MorphologyConfig()

    def to_dict(self) -> dict:
        t, m = self.threshold, self.morphology
        return {"threshold": {"window": t.window, "sigma": t.sigma, "offset": t.offset,
                              "confident": t.confident, "floor": t.floor},
                "morphology": {"min_object_size": m.min_object_size,
                               "min_hole_size": m.min_hole_size}}

    @classmethod
    def from_dict(cls, d: dict) -> "PostprocessConfig":
        return cls(ThresholdConfig(**d.get("threshold", {})),
                   MorphologyConfig(**d.get("morphology", {})))


def gaussian_local_mean(gray: np.ndarray, cfg: ThresholdConfig) -> np.ndarray:
    """Gaussian-weighted window mean with reflective borders."""
    sigma = cfg.effective_sigma
    radius = cfg.window // 2
    return ndimage.gaussian_filter(gray.astype(np.float64), sigma=sigma, mode="reflect",
                                   truncate=radius / sigma)


def gaussian_adaptive_threshold(gray: np.ndarray, cfg: ThresholdConfig = ThresholdConfig()) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {gray.shape}")
    if not np.all(np.isfinite(gray)):
        raise ValueError("image contains non-finite values")
    if cfg.window > 2 * min(gray.shape):
        raise ValueError(f"window {cfg.window} larger than twice the image extent {gray.shape}")
    local = gaussian_local_mean(gray, cfg)
    return (gray > local + cfg.offset).astype(np.uint8)


def binarize_probability(prob: np.ndarray, cfg: ThresholdConfig = ThresholdConfig()) -> np.ndarray:
    """Adaptive threshold of one probability channel, gated by confidence.

    A purely local rule cannot keep the flat interior of a large confident
    region, so confident pixels are kept outright and the local rule only
    recovers faint structures that stand out from their neighbourhood.
    """
    prob = np.asarray(prob, dtype=np.float64)
    local = gaussian_adaptive_threshold(prob, cfg).astype(bool)
    mask = (prob > cfg.confident) | (local & (prob > cfg.floor))
    return mask.astype(np.uint8)


def _components(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels, n = ndimage.label(mask, structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    return labels, sizes


def remove_small_objects(mask: np.ndarray, cfg: MorphologyConfig = MorphologyConfig()) -> np.ndarray:
    """Drop 8-connected foreground components smaller than ``min_object_size``."""
    mask = np.asarray(mask).astype(bool)
    if cfg.min_object_size <= 1 or not mask.any():
        return mask.astype(np.uint8)
    labels, sizes = _components(mask)
    keep = sizes >= cfg.min_object_size
    keep[0] = False
    return keep[labels].astype(np.uint8)


def fill_small_holes(mask: np.ndarray, cfg: MorphologyConfig = MorphologyConfig()) -> np.ndarray:
    """Fill 8-connected background components that do not touch the border and
    are smaller than ``min_hole_size``."""
    mask = np.asarray(mask).astype(bool)
    if cfg.min_hole_size <= 1 or mask.all():
        return mask.astype(np.uint8)
    labels, sizes = _components(~mask)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    fill = sizes < cfg.min_hole_size
    fill[0] = False
    fill[border] = False
    return (mask | fill[labels]).astype(np.uint8)


def one_hot_encode(labels: np.ndarray, classes: int = 3) -> np.ndarray:
    """(H, W) class ids -> (M, H, W) disjoint binary planes."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label values must lie in [0, {classes}); found max {labels.max()}")
    return np.moveaxis(np.eye(classes, dtype=np.uint8)[labels.astype(np.int64)], -1, 0)


def clean_mask(prob: np.ndarray, cfg: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    mask = binarize_probability(prob, cfg.threshold)
    mask = remove_small_objects(mask, cfg.morphology)
    return fill_small_holes(mask, cfg.morphology)


def decode_labels(probs: np.ndarray, cfg: PostprocessConfig = PostprocessConfig(),
                  channel_classes: Optional[list] = None) -> np.ndarray:
    """Probability planes (M, H, W) -> label map.

    By default channel ``c`` votes for class ``c`` and channel 0 is treated as
    background. For a single-task output pass ``channel_classes=[VESSEL]`` or
    ``[FAZ]``. Where several classes claim a pixel the higher class id wins.
    """
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"expected (M, H, W) probabilities, got {probs.shape}")
    if channel_classes is None:
        channel_classes = list(range(probs.shape[0]))
    if len(channel_classes) != probs.shape[0]:
        raise ValueError("channel_classes must name one class per channel")
    out = np.zeros(probs.shape[1:], dtype=np.uint8)
    for cls in sorted(set(channel_classes) - {BACKGROUND}):
        for ch, c in enumerate(channel_classes):
            if c == cls:
                out[clean_mask(probs[ch], cfg).astype(bool)] = cls
    return out
