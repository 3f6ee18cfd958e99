"""Weakly-supervised segmentation branch.

A stack of dilated 3x3 convolutions (dilations 2, 2, 2, 4, each padded to
preserve extent) feeds a shared 1x1 trunk feature.  Two 1x1 heads read it:
one produces per-pixel class probabilities (trained against the box-derived
label grid), the other a full-channel activation map that multiplies back
into the input features, enriching them with the semantics the class head
was forced to learn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, ConvSpec, relu, sigmoid, softmax_channels
from .tensor import ShapeError, Tensor, log, mul, reduce_mean, take_channel_per_pixel
from .weak_gt import SegGrid

TRUNK_DILATIONS = (2, 2, 2, 4)


@dataclass
class SegBranchOutput:
    """Forward products: per-pixel class probabilities, the multiplicative
    activation map, and the activated (enriched) input features."""

    class_probs: Tensor
    activation: Tensor
    activated: Tensor


class SegBranch:
    """Parameters of the segmentation branch for a C-channel input map."""

    def __init__(self, in_channels, num_classes, rng, trunk_width=None,
                 feature_width=None, sigmoid_gate=False, gate_bias_init=1.0,
                 name="seg"):
        if num_classes < 1:
            raise ValueError("need at least one foreground class")
        cb = trunk_width or in_channels
        cf = feature_width or 2 * in_channels
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.sigmoid_gate = sigmoid_gate
        self.atrous = []
        c = in_channels
        for i, d in enumerate(TRUNK_DILATIONS):
            spec = ConvSpec(c, cb, kernel=3, stride=1, padding=d, dilation=d)
            self.atrous.append(Conv2d(spec, rng, name=f"{name}.atrous{i}"))
            c = cb
        self.trunk = Conv2d(ConvSpec(cb, cf, kernel=1), rng, name=f"{name}.trunk")
        self.class_head = Conv2d(ConvSpec(cf, num_classes + 1, kernel=1),
                                 rng, name=f"{name}.class_head")
        # the gate starts near the identity (activation map ~ 1): a branch
        # initialized around zero would multiply the detector's features,
        # and every stage fed by them, down to nothing and stall training
        self.gate_head = Conv2d(ConvSpec(cf, in_channels, kernel=1),
                                rng, name=f"{name}.gate_head")
        self.gate_head.bias.data[:] = gate_bias_init

    def parameters(self):
        ps = []
        for conv in self.atrous:
            ps += conv.parameters()
        return ps + self.trunk.parameters() + self.class_head.parameters() \
            + self.gate_head.parameters()

    def forward(self, x, activate=True):
        """Run the branch on ``x`` (``C x H x W`` or batched).

        With ``activate=False`` the input passes through untouched (the
        arm where segmentation supervises but never multiplies in); the
        class probabilities are produced either way.
        """
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {x.shape[-3]}")
        g = x
        for conv in self.atrous:
            g = relu(conv(g))
        g = relu(self.trunk(g))
        probs = softmax_channels(self.class_head(g))
        z = self.gate_head(g)
        if self.sigmoid_gate:
            z = sigmoid(z)
        activated = mul(x, z) if activate else x
        return SegBranchOutput(class_probs=probs, activation=z, activated=activated)


def seg_forward(x, branch):
    """Standard forward: input features are multiplied by the activation map."""
    return branch.forward(x, activate=True)


def parallel_variant_forward(x, branch):
    """Ablation forward: identical computation but the input is passed
    through unmodified, so segmentation only supervises."""
    return branch.forward(x, activate=False)


def seg_loss(class_probs, grid):
    """Mean negative log-probability of the true label over all grid cells.

    ``class_probs`` is a valid per-location distribution ``(N+1) x H x W``
    (or batched, with a matching batch of label grids).
    """
    labels = grid.labels if isinstance(grid, SegGrid) else np.asarray(grid)
    expect = class_probs.shape[:-3] + class_probs.shape[-2:]
    if labels.shape != expect:
        raise ShapeError(f"label grid {labels.shape} does not match "
                         f"prediction {class_probs.shape}")
    if labels.max(initial=0) >= class_probs.shape[-3]:
        raise ShapeError(f"label {labels.max()} out of range for "
                         f"{class_probs.shape[-3]} channels")
    picked = take_channel_per_pixel(class_probs, labels)
    return -1.0 * reduce_mean(log(picked))
