"""Global channel gating: spatially pool a feature map, squeeze it through a
bottleneck pair of linear maps, and rescale every channel by the resulting
sigmoid gate.  Location information is deliberately destroyed by the pooling,
so the block learns channel/class relationships only."""

from __future__ import annotations

from .layers import Linear, relu, sigmoid
from .tensor import ShapeError, mul, reduce_mean, reshape


class GlobalActivationBlock:
    """Gate a ``C x H x W`` map by per-channel factors in (0, 1).

    The bottleneck width is pinned to C/4, so C must be divisible by 4.
    Both linear maps carry biases (initialized to zero).
    """

    def __init__(self, channels, rng, name="ga"):
        if channels % 4 != 0:
            raise ShapeError(f"channel count {channels} not divisible by 4")
        self.channels = channels
        hidden = channels // 4
        self.squeeze = Linear(channels, hidden, rng, name=f"{name}.squeeze")
        self.excite = Linear(hidden, channels, rng, name=f"{name}.excite")

    def gate(self, x):
        """The per-channel gate vector s = sigmoid(W2 relu(W1 mean_hw(x)))."""
        pooled = reduce_mean(x, axes=(-2, -1))
        return sigmoid(self.excite(relu(self.squeeze(pooled))))

    def __call__(self, x):
        if x.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[-3]}")
        s = self.gate(x)
        return mul(x, reshape(s, s.shape + (1, 1)))

    def parameters(self):
        return self.squeeze.parameters() + self.excite.parameters()


def global_activate(x, block):
    """Functional form of the gating block."""
    return block(x)
