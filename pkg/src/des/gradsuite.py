"""The standard gradient verification battery: every differentiable layer
and the composed objectives, checked by central finite differences at
several random points.  Shared by the `des gradcheck` command and the
acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NetConfig
from .detector import Network, det_loss_batch
from .gradcheck import finite_difference_check, finite_difference_check_param
from .global_activation import GlobalActivationBlock
from .layers import (
    conv2d,
    huber,
    linear,
    relu,
    sigmoid,
    smooth_l1,
    softmax_cross_entropy,
)
from .seg_branch import SegBranch, seg_loss
from .tensor import Tensor
from .train import total_loss
from .weak_gt import rasterize
from .data import render_scene

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    points: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_err < TOLERANCE


def _away_from(rng, shape, keepout=0.25, spread=2.0):
    # random values bounded away from 0 to dodge relu/huber kinks under FD
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(keepout, spread, shape)


def micro_config(seed=0):
    """A tiny but fully wired detector used for the end-to-end checks."""
    return NetConfig(input_size=16, num_classes=2, stem_widths=(4,),
                     source_widths=(8, 8), variant="GS", alpha=0.1,
                     seg_trunk_width=8, seg_feature_width=8,
                     batch_size=1, seed=seed,
                     lr_schedule=((1e-3, 10),))


def run_suite(points=5, eps=1e-5, subsample=48, progress=None):
    """Run every check at ``points`` random draws; returns CheckResult list."""
    results = []

    def record(name, fn):
        t0 = time.perf_counter()
        worst = 0.0
        for p in range(points):
            worst = max(worst, fn(np.random.default_rng(1000 + p), p))
        results.append(CheckResult(name, worst, points, time.perf_counter() - t0))
        if progress:
            r = results[-1]
            progress(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} "
                     f"max rel err {r.max_rel_err:.3e}  ({r.seconds:.2f}s)")

    def conv_check(dilation):
        def fn(rng, p):
            x = rng.normal(size=(2, 8, 8))
            w = rng.normal(size=(3, 2, 3, 3)) * 0.5
            b = rng.normal(size=3) * 0.1
            probe = rng.normal(size=(3, 8, 8))
            worst = finite_difference_check(
                lambda t: T.reduce_sum(T.mul(conv2d(t, Tensor(w), Tensor(b),
                                                    padding=dilation,
                                                    dilation=dilation), probe)),
                x, eps=eps)
            worst = max(worst, finite_difference_check(
                lambda t: T.reduce_sum(T.mul(conv2d(Tensor(x), t, Tensor(b),
                                                    padding=dilation,
                                                    dilation=dilation), probe)),
                w, eps=eps))
            return max(worst, finite_difference_check(
                lambda t: T.reduce_sum(T.mul(conv2d(Tensor(x), Tensor(w), t,
                                                    padding=dilation,
                                                    dilation=dilation), probe)),
                b, eps=eps))
        return fn

    for d in (1, 2, 4):
        record(f"conv2d 3x3 dilation {d}", conv_check(d))

    def linear_check(rng, p):
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(5, 6))
        b = rng.normal(size=5)
        probe = rng.normal(size=(4, 5))
        worst = finite_difference_check(
            lambda t: T.reduce_sum(T.mul(linear(t, Tensor(w), Tensor(b)), probe)), x, eps=eps)
        worst = max(worst, finite_difference_check(
            lambda t: T.reduce_sum(T.mul(linear(Tensor(x), t, Tensor(b)), probe)), w, eps=eps))
        return max(worst, finite_difference_check(
            lambda t: T.reduce_sum(T.mul(linear(Tensor(x), Tensor(w), t), probe)), b, eps=eps))

    record("linear", linear_check)

    def relu_check(rng, p):
        probe = rng.normal(size=(3, 5, 5))
        return finite_difference_check(
            lambda t: T.reduce_sum(T.mul(relu(t), probe)),
            _away_from(rng, (3, 5, 5)), eps=eps)

    record("relu", relu_check)

    def sigmoid_check(rng, p):
        probe = rng.normal(size=(3, 5, 5))
        return finite_difference_check(
            lambda t: T.reduce_sum(T.mul(sigmoid(t), probe)),
            rng.normal(size=(3, 5, 5)), eps=eps)

    record("sigmoid", sigmoid_check)

    def softmax_ce_check(rng, p):
        logits = rng.normal(size=(6, 5)) * 2.0
        labels = rng.integers(0, 5, size=6)
        return finite_difference_check(
            lambda t: T.reduce_sum(softmax_cross_entropy(t, labels)), logits, eps=eps)

    record("softmax cross-entropy", softmax_ce_check)

    def smooth_l1_check(rng, p):
        target = rng.normal(size=(4, 4))
        # keep |pred - target| away from the 1.0 branch switch
        diff = _away_from(rng, (4, 4), keepout=0.1, spread=0.8)
        diff[0] = np.sign(diff[0]) * rng.uniform(1.3, 2.5, size=4)
        return finite_difference_check(
            lambda t: smooth_l1(t, Tensor(target)), target + diff, eps=eps)

    record("smooth-L1", smooth_l1_check)

    def ga_check(rng, p):
        block = GlobalActivationBlock(8, rng)
        x = rng.normal(size=(8, 5, 5))
        probe = rng.normal(size=(8, 5, 5))

        def loss():
            return T.reduce_sum(T.mul(block(Tensor(x)), probe))

        worst = finite_difference_check(
            lambda t: T.reduce_sum(T.mul(block(t), probe)), x, eps=eps)
        for param in block.parameters():
            worst = max(worst, finite_difference_check_param(loss, param, eps=eps))
        return worst

    record("global activation block", ga_check)

    def seg_branch_check(rng, p):
        branch = SegBranch(4, 2, rng, trunk_width=4, feature_width=6)
        x = Tensor(rng.normal(size=(4, 6, 6)))
        grid = rasterize([], 6, 6)
        grid.labels[:] = rng.integers(0, 3, size=(6, 6))
        probe = rng.normal(size=(4, 6, 6))

        def loss():
            out = branch.forward(x)
            # supervise the class path and pull on the activation path too,
            # so both heads carry gradient end to end
            return T.add(seg_loss(out.class_probs, grid),
                         T.reduce_sum(huber(out.activated, Tensor(probe))))

        worst = finite_difference_check(
            lambda t: T.add(seg_loss(branch.forward(t).class_probs, grid),
                            T.reduce_sum(huber(branch.forward(t).activated, Tensor(probe)))),
            x.data, eps=eps, max_coords=subsample, seed=p)
        for param in branch.parameters():
            worst = max(worst, finite_difference_check_param(
                loss, param, eps=eps, max_coords=subsample, seed=p))
        return worst

    record("segmentation branch end-to-end", seg_branch_check)

    def full_loss_check(rng, p):
        cfg = micro_config(seed=p)
        net = Network(cfg)
        scene_rng = np.random.default_rng(500 + p)
        image, boxes, _ = render_scene(scene_rng, classes=2, size=16,
                                       min_px=5, max_px=9)
        match = net.match(boxes)
        grid = rasterize(boxes, cfg.seg_grid_size, cfg.seg_grid_size)
        x = Tensor(image)

        def loss_from(inp):
            out = net.forward(inp)
            cls = T.reshape(out.class_logits, (1,) + out.class_logits.shape)
            box = T.reshape(out.box_offsets, (1,) + out.box_offsets.shape)
            det = det_loss_batch(cls, box, [match], cfg.neg_pos_ratio)
            seg = seg_loss(out.seg.class_probs, grid)
            return total_loss(det, seg, cfg.alpha)

        worst = finite_difference_check(loss_from, image, eps=eps,
                                        max_coords=subsample, seed=p)
        for param in net.parameters():
            worst = max(worst, finite_difference_check_param(
                lambda: loss_from(x), param, eps=eps,
                max_coords=max(4, subsample // 8), seed=p))
        return worst

    record("full objective (det + alpha*seg)", full_loss_check)

    return results


def format_results(results):
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<34} max rel err {r.max_rel_err:.3e} "
                     f"(tol {TOLERANCE:g}, {r.points} points, {r.seconds:.2f}s)")
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results)
    lines.append(f"{'PASS' if ok else 'FAIL'}  overall worst {worst:.3e}")
    return "\n".join(lines)
