"""Segmentation losses.

Single task: focal + MSE on sigmoid probabilities.
Multi task: ``alpha * Lovasz-Softmax + (1 - alpha) * cross-entropy`` on logits,
with the channel softmax applied inside each term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.tensor import Tensor, make_result

EPS = 1e-7


@dataclass(frozen=True)
class SingleTaskLossConfig:
    alpha_t: float = 0.6
    gamma: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.alpha_t < 1.0 and self.alpha_t != 1.0:
            raise ValueError("alpha_t must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class MultiTaskLossConfig:
    alpha: float = 0.6
    classes: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.classes < 2:
            raise ValueError("need at least two classes")


def _as_target(target, like: Tensor) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != like.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {like.shape}")
    return t.astype(like.dtype, copy=False)


def focal_loss(pred: Tensor, target, cfg: SingleTaskLossConfig = SingleTaskLossConfig()) -> Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over all pixels."""
    t = _as_target(target, pred)
    p = ops.clamp(pred, EPS, 1.0 - EPS)
    # p_t = p where t == 1 else 1 - p, written as an affine map of p
    pt = ops.add(ops.mul(p, 2.0 * t - 1.0), 1.0 - t)
    term = ops.log(pt)
    if cfg.gamma != 0:
        term = ops.mul(ops.power(ops.sub(1.0, pt), cfg.gamma), term)
    return ops.mul(ops.mean(term), -cfg.alpha_t)


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    t = _as_target(target, pred)
    p = ops.clamp(pred, EPS, 1.0 - EPS)
    ll = ops.add(ops.mul(ops.log(p), t), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - t))
    return ops.neg(ops.mean(ll))


def mse_loss(pred: Tensor, target) -> Tensor:
    t = _as_target(target, pred)
    d = ops.sub(pred, Tensor(t))
    return ops.mean(ops.mul(d, d))


def single_task_loss(pred: Tensor, target, cfg: SingleTaskLossConfig = SingleTaskLossConfig()) -> Tensor:
    return ops.add(focal_loss(pred, target, cfg), mse_loss(pred, target))


# ---------------------------------------------------------------- multi task
def _class_ids(target, logits: Tensor) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    b, m = logits.shape[:2]
    if y.shape != (b,) + logits.shape[2:]:
        raise ValueError(f"target shape {y.shape} does not match logits {logits.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= m):
        raise ValueError(f"class ids must lie in [0, {m}); found range [{y.min()}, {y.max()}]")
    return y


def _one_hot(y: np.ndarray, m: int, dtype) -> np.ndarray:
    """(B, H, W) ids -> (B, M, H, W) indicators."""
    return np.moveaxis(np.eye(m, dtype=dtype)[y], -1, 1)


def cross_entropy_loss(logits: Tensor, target, cfg: MultiTaskLossConfig = MultiTaskLossConfig()) -> Tensor:
    """Pixel-mean negative log of the softmax probability of the true class."""
    y = _class_ids(target, logits)
    onehot = _one_hot(y, logits.shape[1], logits.dtype)
    # log-softmax is finite for any logits, so no clamp (which would zero the
    # gradient of confidently wrong pixels) is needed here
    picked = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), onehot), axis=1)
    return ops.neg(ops.mean(picked))


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard loss extension at errors sorted in decreasing order."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_extension(errors: np.ndarray, fg: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient (w.r.t. ``errors``) of the Jaccard Lovasz extension."""
    perm = np.argsort(-errors, kind="stable")
    g = lovasz_grad(fg[perm].astype(np.float64))
    value = float(np.dot(errors[perm].astype(np.float64), g))
    grad = np.empty_like(g)
    grad[perm] = g
    return value, grad


def lovasz_softmax_flat(probs: Tensor, y: np.ndarray) -> Tensor:
    """Lovasz-Softmax over flattened pixels.

    ``probs`` is (P, M), ``y`` the (P,) class ids. Classes absent from ``y``
    are skipped; the result is the mean over present classes.
    """
    p = probs.data
    m = p.shape[1]
    present = [c for c in range(m) if np.any(y == c)]
    grad = np.zeros_like(p, dtype=np.float64)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        value, g_err = lovasz_extension(errors, fg)
        total += value
        # d|fg - p| / dp = -1 on foreground pixels, +1 elsewhere
        grad[:, c] += g_err * np.where(fg > 0, -1.0, 1.0)
    k = max(len(present), 1)
    out = np.asarray(total / k, dtype=p.dtype)
    grad = (grad / k).astype(p.dtype)
    return make_result(out, (probs,), lambda g: (g * grad,))


def lovasz_softmax_loss(logits: Tensor, target, cfg: MultiTaskLossConfig = MultiTaskLossConfig()) -> Tensor:
    y = _class_ids(target, logits)
    m = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    flat = ops.reshape(ops.transpose(probs, (0, 2, 3, 1)), (-1, m))
    return lovasz_softmax_flat(flat, y.reshape(-1))


def multi_task_loss(logits: Tensor, target, cfg: MultiTaskLossConfig = MultiTaskLossConfig()) -> Tensor:
    ls = lovasz_softmax_loss(logits, target, cfg)
    ce = cross_entropy_loss(logits, target, cfg)
    return ops.add(ops.mul(ls, cfg.alpha), ops.mul(ce, 1.0 - cfg.alpha))
