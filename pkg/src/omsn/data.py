"""Samples, synthetic OCTA-like images, dataset I/O, splitting and augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .postprocess import BACKGROUND, FAZ, VESSEL, fill_small_holes, remove_small_objects

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """A dataset directory is missing files or contains invalid data."""


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32 (H, W) in [0, 1]
    labels: np.ndarray  # uint8 (H, W) in {0, 1, 2}
    id: str

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and labels {self.labels.shape} differ")


@dataclass
class DatasetManifest:
    ids: list
    splits: dict
    seed: int

    def __post_init__(self):
        seen = [i for s in SPLITS for i in self.splits.get(s, [])]
        if len(seen) != len(set(seen)):
            raise ValueError("splits overlap")
        if sorted(seen) != sorted(self.ids):
            raise ValueError("splits do not cover exactly the listed ids")

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "seed": self.seed,
                "splits": {s: list(self.splits.get(s, [])) for s in SPLITS}}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(list(d["ids"]), {s: list(d["splits"].get(s, [])) for s in SPLITS}, int(d["seed"]))

    def select(self, samples: Sequence[SegmentationSample], split: str) -> list:
        if split == "all":
            return list(samples)
        by_id = {s.id: s for s in samples}
        try:
            return [by_id[i] for i in self.splits[split]]
        except KeyError as exc:
            raise DatasetError(f"manifest refers to unknown sample or split: {exc}") from None


# ------------------------------------------------------------------ synthesis
@dataclass(frozen=True)
class SynthConfig:
    size: int = 96
    tree_count: int = 6
    branch_depth: int = 3
    width_range: tuple = (2.4, 4.0)
    width_decay: float = 0.75
    faz_axes_range: tuple = (0.09, 0.15)
    noise_amplitude: float = 0.12
    contrast_range: tuple = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("size must be >= 32")
        for name in ("width_range", "faz_axes_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if self.tree_count < 1 or self.branch_depth < 0:
            raise ValueError("tree_count must be >= 1 and branch_depth >= 0")


def _stamp_disc(canvas: np.ndarray, y: float, x: float, r: float, value: float) -> None:
    h, w = canvas.shape
    y0, y1 = max(int(math.floor(y - r)), 0), min(int(math.ceil(y + r)) + 1, h)
    x0, x1 = max(int(math.floor(x - r)), 0), min(int(math.ceil(x + r)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - y) ** 2 + (xx - x) ** 2 <= r * r
    patch = canvas[y0:y1, x0:x1]
    np.maximum(patch, np.where(inside, value, 0.0), out=patch)


def _grow(rng, canvas, blocked, y, x, angle, width, depth, cfg, length):
    """Biased random walk that paints a vessel and spawns thinner children."""
    h, w = canvas.shape
    intensity = rng.uniform(0.65, 1.0)
    curvature = rng.normal(0.0, 0.03)
    steps = int(length)
    for step in range(steps):
        angle += curvature + rng.normal(0.0, 0.08)
        y += math.sin(angle)
        x += math.cos(angle)
        iy, ix = int(round(y)), int(round(x))
        if not (0 <= iy < h and 0 <= ix < w) or blocked[iy, ix]:
            return
        _stamp_disc(canvas, y, x, width / 2.0, intensity)
        if depth < cfg.branch_depth and step > 4 and rng.random() < 0.035:
            side = 1.0 if rng.random() < 0.5 else -1.0
            child_angle = angle + side * rng.uniform(0.45, 1.0)
            _grow(rng, canvas, blocked, y, x, child_angle, width * cfg.width_decay, depth + 1,
                  cfg, length * rng.uniform(0.4, 0.7))


def synth_generate(cfg: SynthConfig = SynthConfig(), sample_id: Optional[str] = None) -> SegmentationSample:
    """One synthetic OCTA-like image with vessel and FAZ labels.

    A central avascular ellipse is placed first; vessel trees then grow from
    the border by biased random walks that stop at the ellipse margin. Vessel
    fragments and enclosed gaps under 10 pixels are cleaned away, and the
    image is rendered from the painted vessels plus background texture,
    speckle and a global contrast change.
    """
    n = cfg.size
    rng = np.random.default_rng(cfg.seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    cy, cx = n / 2 + rng.uniform(-0.05, 0.05) * n, n / 2 + rng.uniform(-0.05, 0.05) * n
    a, b = (rng.uniform(*cfg.faz_axes_range) * n for _ in range(2))
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    ell = (u / a) ** 2 + (v / b) ** 2
    faz = ell <= 1.0
    # walks stop a little outside the ellipse so strokes never reach it
    blocked = ell <= (1.0 + (cfg.width_range[1] + 2.0) / min(a, b)) ** 2

    vessels = np.zeros((n, n), dtype=np.float64)
    for _ in range(cfg.tree_count):
        side = rng.integers(4)
        t = rng.uniform(0.1, 0.9) * (n - 1)
        y0, x0 = [(0.0, t), (n - 1.0, t), (t, 0.0), (t, n - 1.0)][side]
        toward = math.atan2(cy - y0, cx - x0) + rng.uniform(-0.6, 0.6)
        _grow(rng, vessels, blocked, y0, x0, toward, rng.uniform(*cfg.width_range), 0, cfg,
              rng.uniform(0.5, 0.9) * n)
    # annotations carry no specks or pinholes below the decoder's size limits
    vessel = fill_small_holes(remove_small_objects((vessels > 0) & ~faz)).astype(bool)
    vessels = np.where(vessel, np.maximum(vessels, ndimage.maximum_filter(vessels, 3)), 0.0)

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[vessel] = VESSEL
    labels[faz] = FAZ

    texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), 1.2)
    texture = 0.12 + 0.10 * texture / (np.abs(texture).max() + 1e-12)
    faz_soft = ndimage.gaussian_filter(faz.astype(np.float64), 1.5)
    image = texture * (1.0 - 0.8 * faz_soft)
    image = np.maximum(image, ndimage.gaussian_filter(vessels, 0.6))
    image = image * (1.0 + cfg.noise_amplitude * rng.standard_normal((n, n)))
    image = np.clip(image * rng.uniform(*cfg.contrast_range), 0.0, 1.0)
    sid = sample_id if sample_id is not None else f"synth_{cfg.seed}"
    return SegmentationSample(image.astype(np.float32), labels, sid)


def synth_dataset(count: int, cfg: SynthConfig = SynthConfig()) -> list:
    """``count`` samples, each from its own stream derived from (seed, index)."""
    if count <= 0:
        raise ValueError("count must be positive")
    out = []
    for i in range(count):
        seq = np.random.SeedSequence([cfg.seed, i])
        sub = replace(cfg, seed=int(seq.generate_state(1)[0]))
        out.append(synth_generate(sub, sample_id=f"synth_{i:04d}"))
    return out


# ------------------------------------------------------------------- disk I/O
def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(samples: Iterable[SegmentationSample], root, manifest: Optional[DatasetManifest] = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(root / "images" / f"{s.id}.png", image_to_uint8(s.image))
        write_png(root / "labels" / f"{s.id}.png", s.labels)
    if manifest is not None:
        write_manifest(manifest, root)
    return root


def write_manifest(manifest: DatasetManifest, root) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root) -> Optional[DatasetManifest]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    return DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))


def load_dataset(root) -> list:
    """Read ``images/<id>.png`` + ``labels/<id>.png`` pairs, sorted by id."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and labels/ subdirectories")
    images = {p.stem: p for p in img_dir.glob("*.png")}
    labels = {p.stem: p for p in lab_dir.glob("*.png")}
    if not images and not labels:
        raise DatasetError(f"{root}: no PNG files found")
    for stem in sorted(set(images) ^ set(labels)):
        where = images.get(stem) or labels.get(stem)
        raise DatasetError(f"{where}: has no matching {'label' if stem in images else 'image'} file")
    out = []
    for stem in sorted(images):
        img = read_png(images[stem])
        lab = read_png(labels[stem])
        if img.ndim != 2:
            raise DatasetError(f"{images[stem]}: expected a single-channel image")
        if img.shape != lab.shape:
            raise DatasetError(f"{labels[stem]}: size {lab.shape} differs from image size {img.shape}")
        bad = np.setdiff1d(np.unique(lab), [BACKGROUND, VESSEL, FAZ])
        if bad.size:
            raise DatasetError(f"{labels[stem]}: illegal label values {bad.tolist()} (allowed 0, 1, 2)")
        out.append(SegmentationSample((img / 255.0).astype(np.float32), lab, stem))
    return out


# ------------------------------------------------------------------- splitting
def split(samples_or_ids: Sequence, seed: int = 0) -> DatasetManifest:
    """Seeded 6:2:2 split; val and test each get floor(n / 5), train the rest."""
    ids = [s.id if isinstance(s, SegmentationSample) else str(s) for s in samples_or_ids]
    n = len(ids)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_hold = n // 5
    shuffled = [ids[i] for i in order]
    splits = {"test": shuffled[:n_hold], "val": shuffled[n_hold:2 * n_hold],
              "train": shuffled[2 * n_hold:]}
    return DatasetManifest(ids, splits, seed)


# ---------------------------------------------------------------- augmentation
def apply_augmentation(sample: SegmentationSample, quarter_turns: int, gamma: float) -> SegmentationSample:
    image = np.rot90(sample.image, quarter_turns)
    labels = np.ascontiguousarray(np.rot90(sample.labels, quarter_turns))
    image = np.clip(np.power(image, gamma), 0.0, 1.0).astype(np.float32)
    return SegmentationSample(np.ascontiguousarray(image), labels, sample.id)


def augment(sample: SegmentationSample, rng: np.random.Generator) -> SegmentationSample:
    """Random right-angle rotation plus gamma contrast jitter in [0.8, 1.25]."""
    k = int(rng.integers(4))
    g = float(rng.uniform(0.8, 1.25))
    return apply_augmentation(sample, k, g)
