"""Central finite-difference verification of analytic gradients.

All checks run in float64 with step ``h = 1e-5``. The error of one element is
``|a - n| / max(|a|, |n|, floor)`` where ``a`` is the analytic and ``n`` the
numeric derivative and ``floor = 1e-3 * max|n|`` over every probed element of
every checked tensor; the floor stops elements whose true derivative is ~0
(a bias feeding batch norm, say) from reporting roundoff noise as relative
error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

STEP = 1e-5


def _sample_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.standard_normal(shape)


def _sample_away_from_zero(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    mag = rng.uniform(0.05, 2.0, size=shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def _sample_positive(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.uniform(0.2, 2.0, size=shape)


def _sample_distinct(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    # well-separated values so a +-h step never swaps a window maximum
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / max(n, 1) * 4.0 - 2.0)


@dataclass
class OpCase:
    fn: Callable[..., Tensor]
    shapes: list
    sample: Callable = _sample_normal
    samplers: Optional[list] = None


def _bn_train(x, g, b):
    c = x.shape[1]
    return ops.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    return ops.batch_norm(x, g, b, np.full(c, 0.3), np.full(c, 1.7), training=False)


ENGINE_OPS: dict[str, OpCase] = {
    "conv2d": OpCase(lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
                     [(1, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_stride2": OpCase(lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
                             [(2, 2, 7, 7), (3, 2, 3, 3), (3,)]),
    "conv2d_1x1": OpCase(lambda x, w: ops.conv2d(x, w), [(2, 3, 4, 5), (2, 3, 1, 1)]),
    "batch_norm_train": OpCase(_bn_train, [(2, 3, 4, 4), (3,), (3,)]),
    "batch_norm_eval": OpCase(_bn_eval, [(2, 3, 4, 4), (3,), (3,)]),
    "batch_norm_dense": OpCase(_bn_train, [(4, 5), (5,), (5,)]),
    "relu": OpCase(ops.relu, [(2, 3, 4, 4)], sample=_sample_away_from_zero),
    "sigmoid": OpCase(ops.sigmoid, [(2, 3, 4, 4)]),
    "softmax": OpCase(lambda x: ops.softmax(x, axis=1), [(1, 4)]),
    "softmax_channels": OpCase(lambda x: ops.softmax(x, axis=1), [(2, 3, 3, 3)]),
    "log_softmax": OpCase(lambda x: ops.log_softmax(x, axis=1), [(2, 3, 3, 3)]),
    "max_pool_ceil": OpCase(lambda x: ops.max_pool(x, 3, 2, ceil_mode=True), [(1, 2, 7, 7)],
                            sample=_sample_distinct),
    "max_pool_2x2": OpCase(lambda x: ops.max_pool(x, 2, 2, ceil_mode=True), [(2, 2, 5, 5)],
                           sample=_sample_distinct),
    "avg_pool_ceil": OpCase(lambda x: ops.avg_pool(x, 2, 2, ceil_mode=True), [(2, 2, 5, 5)]),
    "bilinear_up": OpCase(lambda x: ops.bilinear_resize(x, 9, 7), [(1, 2, 5, 4)]),
    "bilinear_down": OpCase(lambda x: ops.bilinear_resize(x, 3, 2), [(1, 2, 5, 4)]),
    "concat_channels": OpCase(lambda a, b: ops.concat_channels([a, b]),
                              [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "global_avg_pool": OpCase(ops.global_avg_pool, [(2, 3, 4, 5)]),
    "linear": OpCase(ops.linear, [(3, 4), (5, 4), (5,)]),
    "add": OpCase(ops.add, [(2, 3, 2, 2), (1, 3, 1, 1)]),
    "mul": OpCase(ops.mul, [(2, 3, 2, 2), (2, 3, 2, 2)]),
    "scale_channels": OpCase(ops.scale_channels, [(2, 3, 4, 4), (2, 3)]),
    "log": OpCase(ops.log, [(3, 4)], sample=_sample_positive),
    "power": OpCase(lambda x: ops.power(x, 1.2), [(3, 4)], sample=_sample_positive),
    "mean": OpCase(lambda x: ops.mean(x, axis=(0, 2)), [(2, 3, 4)]),
    "reshape_transpose": OpCase(lambda x: ops.transpose(ops.reshape(x, (2, 3, 4)), (1, 0, 2)),
                                [(2, 12)]),
    "getitem": OpCase(lambda x: x[:, 1], [(2, 3, 4)]),
}


def finite_difference_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                            h: float = STEP, max_per_tensor: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` must rebuild the scalar from the current ``.data`` of
    ``tensors`` on every call. With ``max_per_tensor`` only that many randomly
    chosen elements per tensor are probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        return float("inf")
    loss.backward()
    all_a, all_n = [], []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            return float("inf")
        flat_idx = np.arange(t.size)
        if max_per_tensor is not None and t.size > max_per_tensor:
            flat_idx = np.sort(rng.choice(t.size, size=max_per_tensor, replace=False))
        a_vals, n_vals = [], []
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.shape)
            orig = t.data[idx]
            with no_grad():
                t.data[idx] = orig + h
                fp = float(loss_fn().data)
                t.data[idx] = orig - h
                fm = float(loss_fn().data)
            t.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return float("inf")
            n_vals.append((fp - fm) / (2.0 * h))
            a_vals.append(float(analytic[idx]))
        all_a.extend(a_vals)
        all_n.extend(n_vals)
    if not all_a:
        return 0.0
    a_arr, n_arr = np.asarray(all_a), np.asarray(all_n)
    floor = max(1e-3 * float(np.abs(n_arr).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a_arr), np.abs(n_arr)), floor)
    return float((np.abs(a_arr - n_arr) / denom).max())


def projected_scalar(out: Tensor, proj: np.ndarray) -> Tensor:
    """Reduce an op output to a scalar with fixed random weights."""
    return ops.sum(ops.mul(out, Tensor(proj)))


def grad_check(op, input_shapes: Optional[Sequence[tuple]] = None, seed: int = 0,
               h: float = STEP) -> float:
    """Max relative gradient error of a registered op (or an ``OpCase``)."""
    case = ENGINE_OPS[op] if isinstance(op, str) else op
    shapes = list(input_shapes) if input_shapes is not None else case.shapes
    if len(shapes) != len(case.shapes):
        raise ValueError(f"expected {len(case.shapes)} input shapes, got {len(shapes)}")
    rng = np.random.default_rng(seed)
    samplers = case.samplers or [case.sample] + [_sample_normal] * (len(shapes) - 1)
    inputs = [Tensor(samplers[i](rng, tuple(s)).astype(np.float64), requires_grad=True)
              for i, s in enumerate(shapes)]
    with no_grad():
        probe = case.fn(*inputs)
    proj = rng.standard_normal(probe.shape)
    return finite_difference_error(lambda: projected_scalar(case.fn(*inputs), proj), inputs, h)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    scope: str = "engine"
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)
