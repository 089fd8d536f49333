"""Training loop: Adam with coupled L2 decay, poly learning rate, Dice early stopping."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from .archive import ModelArchive, archive_model
from .data import SegmentationSample, augment
from .engine import ops
from .engine.tensor import Tensor, no_grad
from .metrics import report
from .postprocess import FAZ, VESSEL, PostprocessConfig, decode_labels

log = logging.getLogger(__name__)

TASKS = ("single", "multi")


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    power: float = 0.9
    max_epochs: int = 200
    batch_size: int = 2
    weight_decay: float = 1e-4
    seed: int = 0
    task: str = "multi"
    patience: int = 20
    target_class: int = VESSEL
    augment: bool = True
    alpha_t: float = 0.6
    gamma: float = 1.2
    alpha: float = 0.6

    def __post_init__(self):
        if self.lr_init <= 0 or self.power <= 0:
            raise ValueError("lr_init and power must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.task == "single" and self.target_class not in (VESSEL, FAZ):
            raise ValueError("single-task training targets the vessel (1) or FAZ (2) class")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-scale preset used for the synthetic experiments."""
        base = cls(lr_init=2e-3, max_epochs=30, patience=30)
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    return cfg.lr_init * (1.0 - epoch / cfg.max_epochs) ** cfg.power


# ------------------------------------------------------------------ optimiser
@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    rejected: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState,
              lr: float, weight_decay: float = 0.0) -> bool:
    """One bias-corrected Adam update with L2 decay folded into the gradient.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite; such steps are counted in ``state.rejected``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            state.rejected += 1
            log.warning("non-finite gradient; skipping step (%d rejected so far)", state.rejected)
            return False
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return True


# -------------------------------------------------------------------- batching
def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled batches covering range(n) once; a trailing singleton joins the
    previous batch because batch norm needs two values per channel."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return [b.tolist() for b in batches]


def stack_batch(samples: Sequence[SegmentationSample]) -> tuple:
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return Tensor(images), labels


def batch_loss(model, images: Tensor, labels: np.ndarray, cfg: TrainConfig) -> Tensor:
    logits = model.forward_logits(images)
    if cfg.task == "multi":
        return losses.multi_task_loss(logits, labels, losses.MultiTaskLossConfig(cfg.alpha))
    target = (labels == cfg.target_class).astype(np.float32)[:, None]
    return losses.single_task_loss(ops.sigmoid(logits), target,
                                   losses.SingleTaskLossConfig(cfg.alpha_t, cfg.gamma))


def train_epoch(model, samples: Sequence[SegmentationSample], cfg: TrainConfig,
                state: OptimizerState, lr: float, rng: np.random.Generator) -> float:
    """One pass over ``samples``; returns the mean batch loss."""
    model.train()
    params = model.parameters()
    total, count = 0.0, 0
    for batch in batch_indices(len(samples), cfg.batch_size, rng):
        chosen = [samples[i] for i in batch]
        if cfg.augment:
            chosen = [augment(s, rng) for s in chosen]
        images, labels = stack_batch(chosen)
        model.zero_grad()
        loss = batch_loss(model, images, labels, cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            state.rejected += 1
            log.warning("non-finite loss; skipping batch")
            continue
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr, cfg.weight_decay)
        total += value
        count += 1
    model.zero_grad()
    return total / max(count, 1)


# ------------------------------------------------------------------ prediction
def predict_probabilities(model, images: np.ndarray, task: str, batch_size: int = 4) -> np.ndarray:
    """(N, H, W) images -> (N, OC, H, W) probabilities, in inference mode."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32)[:, None])
            out.append(model.probabilities(x, task).data)
    model.train(was_training)
    return np.concatenate(out, axis=0)


def channel_classes(task: str, target_class: int, channels: int) -> list:
    return list(range(channels)) if task == "multi" else [target_class]


def predict_labels(model, images: np.ndarray, task: str, target_class: int = VESSEL,
                   pp: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    probs = predict_probabilities(model, images, task)
    chans = channel_classes(task, target_class, probs.shape[1])
    return np.stack([decode_labels(p, pp, chans) for p in probs])


def foreground_classes(task: str, target_class: int) -> list:
    return [VESSEL, FAZ] if task == "multi" else [target_class]


def validate(model, samples: Sequence[SegmentationSample], cfg: TrainConfig,
             pp: PostprocessConfig = PostprocessConfig(),
             predictor: Optional[Callable] = None) -> float:
    """Mean over images of the macro foreground Dice after post-processing.

    ``predictor`` maps an (N, H, W) image stack to (N, M, H, W) probabilities;
    it defaults to the model in inference mode.
    """
    if not samples:
        raise ValueError("validation split is empty")
    images = np.stack([s.image for s in samples])
    if predictor is None:
        probs = predict_probabilities(model, images, cfg.task)
    else:
        probs = predictor(images)
    chans = channel_classes(cfg.task, cfg.target_class, probs.shape[1])
    fg = foreground_classes(cfg.task, cfg.target_class)
    scores = []
    for p, s in zip(probs, samples):
        pred = decode_labels(p, pp, chans)
        scores.append(report(pred, s.labels, foreground=fg).macro["dice"])
    return float(np.mean(scores))


def evaluate(samples: Sequence[SegmentationSample], predictor: Callable, task: str,
             target_class: int = VESSEL, pp: PostprocessConfig = PostprocessConfig()) -> dict:
    """Per-image reports over ``samples`` aggregated to mean and std.

    ``predictor`` maps an (N, H, W) image stack to (N, M, H, W) probabilities.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    probs = predictor(np.stack([s.image for s in samples]))
    chans = channel_classes(task, target_class, probs.shape[1])
    fg = foreground_classes(task, target_class)
    reports = [report(decode_labels(p, pp, chans), s.labels, foreground=fg)
               for p, s in zip(probs, samples)]
    out = summarize(reports)
    out["images"] = [s.id for s in samples]
    return out


def summarize(reports: list) -> dict:
    """Mean and population std of every metric, per class and macro."""
    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    classes = list(reports[0].per_class)
    metrics = list(reports[0].macro)
    per_class = {c: {m: stats([r.per_class[c][m] for r in reports]) for m in metrics} for c in classes}
    macro = {m: stats([r.macro[m] for r in reports]) for m in metrics}
    counts = {c: {k: int(sum(r.counts[c][k] for r in reports)) for k in ("tp", "fp", "tn", "fn")}
              for c in classes}
    mean = {c: {m: v["mean"] for m, v in d.items()} for c, d in per_class.items()}
    std = {c: {m: v["std"] for m, v in d.items()} for c, d in per_class.items()}
    mean["macro"] = {m: v["mean"] for m, v in macro.items()}
    std["macro"] = {m: v["std"] for m, v in macro.items()}
    return {"per_class": per_class, "macro": macro, "mean": mean, "std": std, "counts": counts}


# ----------------------------------------------------------------------- fit
@dataclass
class FitResult:
    archive: ModelArchive
    log: list
    best_epoch: int
    best_dice: float
    rejected_steps: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_dice"])
        for row in self.log:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_dice"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_dice": self.best_dice,
                "epochs_run": len(self.log), "rejected_steps": self.rejected_steps}


def fit(model, train_samples: Sequence[SegmentationSample], val_samples: Sequence[SegmentationSample],
        cfg: TrainConfig, pp: PostprocessConfig = PostprocessConfig(),
        validator: Optional[Callable] = None, provenance: Optional[dict] = None) -> FitResult:
    """Train, validating after every epoch; keep the snapshot with the best val Dice.

    ``validator(model) -> float`` replaces :func:`validate` when given.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_params(model.parameters())
    history, best, best_epoch, best_state, stale = [], -np.inf, -1, None, 0
    for epoch in range(cfg.max_epochs):
        lr = poly_lr(epoch, cfg)
        loss = train_epoch(model, train_samples, cfg, state, lr, rng)
        dice = validator(model) if validator is not None else validate(model, val_samples, cfg, pp)
        history.append({"epoch": epoch, "lr": lr, "train_loss": loss, "val_dice": dice})
        log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr, loss, dice)
        if dice > best:
            best, best_epoch, stale = dice, epoch, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
    model.load_state_dict(best_state)
    model.eval()
    extra = {"task": cfg.task, "target_class": cfg.target_class, "train": cfg.to_dict(),
             "postprocess": pp.to_dict(), "best_epoch": best_epoch, "best_val_dice": best}
    if provenance:
        extra["provenance"] = provenance
    return FitResult(archive_model(model, **extra), history, best_epoch, float(best), state.rejected)
