"""Central finite-difference checks of every differentiable op and composite block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blocks import Bottleneck, ClassifierHead, ReductionHead, SEBlock, se_block
from .model import build, joint_loss, nano_config


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    kinks: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_error <= tol


def _project(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <x, weights>; turns any tensor output into a checkable loss."""
    return ag._result(np.asarray((x.data * weights).sum()), (x,), lambda g: (g * weights,), "project")


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def check(
    name: str,
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-5,
    max_entries: int = 30,
) -> CheckResult:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    At most ``max_entries`` randomly chosen coordinates per leaf are perturbed.
    A coordinate whose +eps and -eps passes take different relu or max-pool
    branches straddles a kink, where no derivative exists; it is counted in
    ``kinks`` and replaced by another coordinate. ``loss_fn`` must be
    deterministic (batch-norm running stats may change; they do not feed
    back into a train-mode forward).
    """
    for leaf in leaves:
        leaf.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    worst, count, kinks = 0.0, 0, 0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        order = rng.permutation(flat.size)
        taken = 0
        for idx in order:
            if taken == max_entries:
                break
            orig = flat[idx]
            with ag.record_branches() as up_path:
                flat[idx] = orig + eps
                up = float(loss_fn().data)
            with ag.record_branches() as down_path:
                flat[idx] = orig - eps
                down = float(loss_fn().data)
            flat[idx] = orig
            if len(up_path) != len(down_path) or any(not np.array_equal(a, b) for a, b in zip(up_path, down_path)):
                kinks += 1
                continue
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(grad.reshape(-1)[idx]), numeric))
            count += 1
            taken += 1
    return CheckResult(name, worst, count, kinks)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def run_all(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    results = []

    def add(name, make_out, leaves):
        out_shape = make_out().shape
        w = rng.standard_normal(out_shape)
        results.append(check(name, lambda: _project(make_out(), w), leaves, rng, eps))

    x = _t(rng, 2, 3, 7, 6)
    w3 = _t(rng, 4, 3, 3, 3, scale=0.5)
    b = _t(rng, 4)
    add("conv2d 3x3 pad1", lambda: ag.conv2d(x, w3, b, 1, 1), [x, w3, b])
    add("conv2d 3x3 stride2", lambda: ag.conv2d(x, w3, None, 2, 0), [x, w3])
    w1 = _t(rng, 5, 3, 1, 1)
    add("conv2d 1x1 stride2", lambda: ag.conv2d(x, w1, None, 2, 0), [x, w1])
    w7 = _t(rng, 2, 3, 7, 7, scale=0.2)
    add("conv2d 7x7 stride2 pad3", lambda: ag.conv2d(x, w7, None, 2, 3), [x, w7])
    add("max_pool 3/2/1", lambda: ag.max_pool(x, 3, 2, 1), [x])
    add("max_pool 2/2/0", lambda: ag.max_pool(x, 2, 2, 0), [x])
    add("gap", lambda: ag.gap(x), [x])
    add("relu", lambda: ag.relu(x), [x])
    add("sigmoid", lambda: ag.sigmoid(x), [x])
    add("leaky_relu", lambda: ag.leaky_relu(x, 0.1), [x])
    gamma, beta = _t(rng, 3), _t(rng, 3)
    add(
        "batch_norm train",
        lambda: ag.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True),
        [x, gamma, beta],
    )
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    add("batch_norm eval", lambda: ag.batch_norm(x, gamma, beta, rm, rv, False), [x, gamma, beta])
    xl, wl, bl = _t(rng, 4, 6), _t(rng, 5, 6), _t(rng, 5)
    add("linear", lambda: ag.linear(xl, wl, bl), [xl, wl, bl])
    logits = _t(rng, 4, 7, scale=2.0)
    labels = rng.integers(0, 7, size=4)
    results.append(check("softmax_log_loss", lambda: ag.softmax_log_loss(logits, labels), [logits], rng, eps))
    s = Tensor(rng.uniform(0.1, 0.9, (2, 3)), requires_grad=True, dtype=f64)
    add("scale_channels", lambda: ag.scale_channels(x, s), [x, s])
    y = _t(rng, 2, 3, 7, 6)
    add("add", lambda: ag.add(x, y), [x, y])
    add("reshape", lambda: ag.reshape(x, (2, 3 * 7 * 6)), [x])

    xb = _t(rng, 2, 16, 6, 4)
    se = SEBlock(16, 4, rng, f64)
    add("se_block", lambda: se_block(xb, se), [xb, se.w1, se.w2])
    blk = Bottleneck(16, 8, rng, stride=2, dtype=f64)
    add("bottleneck (projection)", lambda: blk(xb), [xb] + [p for _, p in blk.named_parameters()])
    seblk = Bottleneck(16, 4, rng, stride=1, se_ratio=4, dtype=f64)
    add("se_res_module", lambda: seblk(xb), [xb] + [p for _, p in seblk.named_parameters()])
    xh = _t(rng, 4, 16)
    red = ReductionHead(16, 6, rng, f64)
    add("reduction_head", lambda: red(xh), [xh] + [p for _, p in red.named_parameters()])
    xf = _t(rng, 4, 6)
    cls = ClassifierHead(6, 5, rng, f64)
    add("classifier_head", lambda: cls(xf), [xf] + [p for _, p in cls.named_parameters()])

    cfg = nano_config(input_hw=(64, 32), num_classes=5, dtype="float64")
    model = build(cfg, seed=seed)
    images = Tensor(rng.standard_normal((4, 3, 64, 32)), dtype=f64)
    targets = rng.integers(0, cfg.num_classes, size=4)
    params = [p for _, p in model.named_parameters()]
    chosen = [params[i] for i in rng.choice(len(params), 12, replace=False)]
    results.append(
        check(
            "nano model joint loss",
            lambda: joint_loss(model(images)[1], targets),
            chosen,
            rng,
            eps,
            max_entries=4,
        )
    )
    return results


def format_table(results: Sequence[CheckResult], tol: float) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'n':>4}  {'kinks':>5}  status"]
    for r in results:
        status = "ok" if r.ok(tol) else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_error:12.3e}  {r.checked:4d}  {r.kinks:5d}  {status}")
    return "\n".join(lines)
