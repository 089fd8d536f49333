"""Double-precision finite-difference suite grouped by scope."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import losses
from .blocks import ResNeStBlock, SplitAttention
from .engine import ops
from .engine.gradcheck import (ENGINE_OPS, STEP, CheckResult, finite_difference_error, grad_check,
                               projected_scalar)
from .engine.layers import ConvBNReLU
from .engine.tensor import Tensor, no_grad
from .network import OMSN, SkipFusion, preset

SCOPES = ("engine", "blocks", "losses", "network")
OP_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4
# a stem weight moves thousands of ReLU and max-pool switch points, so the
# end-to-end loss is only smooth on a scale well below the op-level step
NETWORK_STEP = 1e-7


def _module_error(module, make_inputs: Callable, forward: Callable, seed: int,
                  max_per_tensor: Optional[int] = None, h: float = STEP) -> float:
    """Gradient error w.r.t. the inputs and every parameter of a float64 module."""
    rng = np.random.default_rng(seed)
    module.astype(np.float64)
    module.train()
    inputs = [Tensor(a, requires_grad=True) for a in make_inputs(rng)]
    with no_grad():
        probe = forward(*inputs)
    proj = rng.standard_normal(probe.shape)
    tensors = inputs + module.parameters()
    return finite_difference_error(lambda: projected_scalar(forward(*inputs), proj), tensors,
                                   h=h, max_per_tensor=max_per_tensor, rng=rng)


def engine_checks(seed: int = 0) -> list:
    return [CheckResult(name, grad_check(name, seed=seed), OP_TOLERANCE, "engine")
            for name in ENGINE_OPS]


def block_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []

    sa = SplitAttention(group_width=4, radix=2, inter_channels=8, rng=rng)
    err = _module_error(sa, lambda r: [r.standard_normal((2, 4, 3, 3)), r.standard_normal((2, 4, 3, 3))],
                        lambda a, b: sa([a, b]), seed)
    out.append(CheckResult("split_attention", err, OP_TOLERANCE, "blocks"))

    sa3 = SplitAttention(group_width=3, radix=3, inter_channels=8, rng=rng)
    err = _module_error(sa3, lambda r: [r.standard_normal((3, 3, 2, 2)) for _ in range(3)],
                        lambda a, b, c: sa3([a, b, c]), seed)
    out.append(CheckResult("split_attention_radix3", err, OP_TOLERANCE, "blocks"))

    cbr = ConvBNReLU(2, 3, 3, rng=rng)
    err = _module_error(cbr, lambda r: [r.standard_normal((2, 2, 5, 5))], cbr, seed)
    out.append(CheckResult("conv_bn_relu", err, OP_TOLERANCE, "blocks"))

    ident = ResNeStBlock(4, 4, stride=1, radix=2, width=4, inter_channels=8, rng=rng)
    err = _module_error(ident, lambda r: [r.standard_normal((2, 4, 5, 5))], ident, seed)
    out.append(CheckResult("resnest_block_identity", err, OP_TOLERANCE, "blocks"))

    down = ResNeStBlock(3, 6, stride=2, cardinality=2, radix=2, width=4, inter_channels=8, rng=rng)
    err = _module_error(down, lambda r: [r.standard_normal((2, 3, 7, 7))], down, seed)
    out.append(CheckResult("resnest_block_strided", err, OP_TOLERANCE, "blocks"))

    cfg = preset("gradcheck", scales=3, stage_channels=(4, 4), input_size=16)
    fusion = SkipFusion(2, cfg, rng)
    shapes = [(2, 8, 8, 8), (2, 4, 4, 4), (2, 4, 2, 2)]

    def fuse(e1, e2, e3):
        return fusion([e1, e2, e3], {3: e3}, extent=4)

    err = _module_error(fusion, lambda r: [r.standard_normal(s) for s in shapes], fuse, seed)
    out.append(CheckResult("skip_fusion", err, OP_TOLERANCE, "blocks"))
    return out


def _loss_error(fn: Callable[[Tensor], Tensor], shape: tuple, seed: int,
                sample: Optional[Callable] = None) -> float:
    rng = np.random.default_rng(seed)
    data = sample(rng, shape) if sample is not None else rng.standard_normal(shape)
    x = Tensor(data.astype(np.float64), requires_grad=True)
    return finite_difference_error(lambda: fn(x), [x])


def loss_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed + 1)
    binary = (rng.random((2, 1, 4, 4)) < 0.4).astype(np.float64)
    labels = rng.integers(0, 3, size=(2, 5, 5))
    labels_missing = np.where(labels == 2, 0, labels)

    def prob(r, shape):
        return r.uniform(0.05, 0.95, size=shape)

    single = losses.SingleTaskLossConfig()
    cases = {
        "focal": (lambda p: losses.focal_loss(p, binary, single), binary.shape, prob),
        "binary_cross_entropy": (lambda p: losses.binary_cross_entropy(p, binary), binary.shape, prob),
        "mse": (lambda p: losses.mse_loss(p, binary), binary.shape, prob),
        "single_task": (lambda z: losses.single_task_loss(ops.sigmoid(z), binary, single), binary.shape, None),
        "cross_entropy": (lambda z: losses.cross_entropy_loss(z, labels), (2, 3, 5, 5), None),
        "lovasz_softmax": (lambda z: losses.lovasz_softmax_loss(z, labels), (2, 3, 5, 5), None),
        "lovasz_softmax_absent_class": (lambda z: losses.lovasz_softmax_loss(z, labels_missing),
                                        (2, 3, 5, 5), None),
        "multi_task": (lambda z: losses.multi_task_loss(z, labels), (2, 3, 5, 5), None),
    }
    return [CheckResult(name, _loss_error(fn, shape, seed, sample), OP_TOLERANCE, "losses")
            for name, (fn, shape, sample) in cases.items()]


def network_checks(seed: int = 0, max_per_tensor: int = 3, batch: int = 4) -> list:
    # batch 4: with two samples the attention batch norm sees two nearly equal
    # pooled vectors and becomes almost a step function, which central
    # differences cannot resolve even though backward is exact
    out = []
    for oc in (1, 3):
        cfg = preset("gradcheck", output_channels=oc)
        model = OMSN(cfg, seed=seed)
        s = cfg.input_size
        err = _module_error(model, lambda r: [r.standard_normal((batch, 1, s, s))], model.forward_logits,
                            seed, max_per_tensor=max_per_tensor, h=NETWORK_STEP)
        out.append(CheckResult(f"omsn_end_to_end_oc{oc}", err, NETWORK_TOLERANCE, "network",
                               {"parameters": model.num_parameters()}))
    return out


def run_suite(scope: str = "all", seed: int = 0) -> list:
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"scope must be 'all' or one of {SCOPES}")
    runners = {"engine": engine_checks, "blocks": block_checks,
               "losses": loss_checks, "network": network_checks}
    chosen = SCOPES if scope == "all" else (scope,)
    results = []
    for name in chosen:
        results.extend(runners[name](seed))
    return results


def format_table(results: list) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'scope':8} {'check':{width}} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.scope:8} {r.name:{width}} {r.error:12.3e} {r.tolerance:8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
