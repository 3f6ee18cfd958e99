"""SGD training loop: multi-task objective, momentum + weight decay,
stepped learning-rate schedule, loss-curve CSV and checkpointing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, NetConfig
from .data import Sample
from .detector import Network, det_loss_batch
from .seg_branch import seg_loss
from .serialize import save_checkpoint
from .tensor import Tensor, backward, find_first_nonfinite
from .weak_gt import BoundingBox, rasterize


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the message names the first bad tape node."""


def total_loss(det, seg, alpha):
    """Combined objective: detection loss plus ``alpha`` times the
    segmentation loss.  Works on floats and on tape tensors alike."""
    if isinstance(det, Tensor) or isinstance(seg, Tensor):
        return T.add(det, T.mul(seg, float(alpha)))
    return det + alpha * seg


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay:
    ``v = momentum*v + grad + weight_decay*param; param -= lr*v``."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0005):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocities):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data = p.data - lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(param, grad, velocity, lr, momentum=0.9, weight_decay=0.0005):
    """One functional update; returns (new_param, new_velocity)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise T.ShapeError(f"param shape {param.shape} != grad shape {grad.shape}")
    v = momentum * np.asarray(velocity, dtype=np.float64) + grad + weight_decay * param
    return param - lr * v, v


def lr_at(schedule, iteration):
    """Learning rate for a 0-based iteration under a phased schedule."""
    passed = 0
    for lr, steps in schedule:
        passed += steps
        if iteration < passed:
            return lr
    return schedule[-1][0]


def flip_horizontal(sample_image, boxes):
    flipped = np.ascontiguousarray(sample_image[:, :, ::-1])
    fboxes = [BoundingBox(b.class_id, 1.0 - b.xmax, b.ymin, 1.0 - b.xmin,
                          b.ymax, difficult=b.difficult) for b in boxes]
    return flipped, fboxes


@dataclass
class TrainResult:
    net: Network
    rows: list = field(default_factory=list)  # (iteration, det, seg, total)
    checkpoint: Path | None = None
    loss_csv: Path | None = None


def loss_rows_to_csv(rows):
    lines = ["iteration,loss_det,loss_seg,loss_total"]
    for it, det, seg, tot in rows:
        lines.append(f"{it},{det!r},{seg!r},{tot!r}")
    return "\n".join(lines) + "\n"


def train(cfg: NetConfig, dataset, out_dir=None, log_every=0):
    """Train a fresh network on ``dataset`` under ``cfg``.

    Deterministic given the config (which includes the seed): batch
    sampling, flip augmentation and initialization all draw from seeded
    generators.  Writes ``loss.csv`` and checkpoint files when ``out_dir``
    is given.  A non-finite loss aborts with the first offending node.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("dataset: must not be empty")
    for i, s in enumerate(dataset):
        if s.image.shape != (3, cfg.input_size, cfg.input_size):
            raise ConfigError(f"dataset: sample {i} has shape {s.image.shape}, "
                              f"expected (3, {cfg.input_size}, {cfg.input_size})")

    net = Network(cfg)
    opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x7E41])
    grid = cfg.seg_grid_size
    has_seg = net.seg is not None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows = []
    total_iters = cfg.total_iterations
    for it in range(total_iters):
        lr = lr_at(cfg.lr_schedule, it)
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        images, matches, label_grids = [], [], []
        for j in idx:
            s: Sample = dataset[int(j)]
            image, boxes = s.image, s.boxes
            if cfg.flip_augment and rng.random() < 0.5:
                image, boxes = flip_horizontal(image, boxes)
            images.append(image)
            matches.append(net.match(boxes))
            if has_seg:
                label_grids.append(rasterize(boxes, grid, grid).labels)

        batch = Tensor(np.stack(images))
        fwd = net.forward(batch)
        det = det_loss_batch(fwd.class_logits, fwd.box_offsets, matches,
                             cfg.neg_pos_ratio)
        if has_seg:
            seg = seg_loss(fwd.seg.class_probs, np.stack(label_grids))
            loss = total_loss(det, seg, cfg.alpha)
            seg_val = seg.item()
        else:
            loss, seg_val = det, 0.0

        if not np.isfinite(loss.data):
            bad = find_first_nonfinite(loss)
            where = f"{bad.op}" + (f" ({bad.name})" if bad.name else "") if bad else "loss"
            raise TrainingDiverged(f"non-finite loss at iteration {it}: "
                                   f"first bad node is {where}")

        backward(loss, opt.params)
        opt.step(lr)
        opt.zero_grad()
        rows.append((it, det.item(), seg_val, loss.item()))
        if log_every and (it + 1) % log_every == 0:
            print(f"iter {it + 1}/{total_iters}  lr={lr:g}  "
                  f"det={rows[-1][1]:.4f}  seg={rows[-1][2]:.4f}  "
                  f"total={rows[-1][3]:.4f}", flush=True)
        if out is not None and cfg.checkpoint_every and \
                (it + 1) % cfg.checkpoint_every == 0 and (it + 1) < total_iters:
            save_checkpoint(out / f"checkpoint_{it + 1:06d}.tnsr",
                            net.named_parameters(), cfg.to_dict())

    result = TrainResult(net=net, rows=rows)
    if out is not None:
        result.loss_csv = out / "loss.csv"
        result.loss_csv.write_text(loss_rows_to_csv(rows))
        result.checkpoint = out / "checkpoint.tnsr"
        save_checkpoint(result.checkpoint, net.named_parameters(), cfg.to_dict())
    return result


def moving_average(values, window):
    """Trailing moving average; entry i averages values[i-window+1 .. i]."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or window > len(values):
        raise ValueError(f"window {window} out of range for {len(values)} values")
    c = np.concatenate([[0.0], np.cumsum(values)])
    return (c[window:] - c[:-window]) / window
