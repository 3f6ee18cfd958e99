"""Neural building blocks: dilated conv, linear maps, activations, pooling,
and the loss primitives (smooth-L1, softmax cross-entropy).

All layer functions take ``C x H x W`` tensors and transparently accept an
extra leading batch axis.  Convolution is cross-correlation (no kernel
flip), the convention of the frameworks this style of detector grew up in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import (
    ShapeError,
    Tensor,
    _node,
    as_tensor,
    reduce_sum,
    take_per_row,
)

__all__ = [
    "ConvSpec",
    "Conv2d",
    "Linear",
    "conv2d",
    "conv_out_extent",
    "relu",
    "sigmoid",
    "softmax_channels",
    "log_softmax_rows",
    "maxpool2",
    "huber",
    "smooth_l1",
    "softmax_cross_entropy",
    "xavier_uniform",
]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Static configuration of one 2-d convolution."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.dilation not in (1, 2, 4):
            raise ValueError(f"dilation must be one of 1, 2, 4; got {self.dilation}")

    def out_extent(self, extent):
        return conv_out_extent(extent, self.kernel, self.stride, self.padding, self.dilation)


def conv_out_extent(extent, kernel, stride, padding, dilation):
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def xavier_uniform(rng, shape, fan_in, fan_out):
    """Fan-average uniform initialization."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """A convolution layer owning its kernel weights and bias."""

    def __init__(self, spec, rng=None, weight=None, bias=None, name="conv"):
        self.spec = spec
        k, ci, co = spec.kernel, spec.in_channels, spec.out_channels
        if weight is None:
            if rng is None:
                raise ValueError("need an rng or explicit weights")
            weight = xavier_uniform(rng, (co, ci, k, k), ci * k * k, co * k * k)
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(co) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")
        if self.weight.shape != (co, ci, k, k):
            raise ShapeError(f"weight shape {self.weight.shape} != {(co, ci, k, k)}")
        if self.bias.shape != (co,):
            raise ShapeError(f"bias shape {self.bias.shape} != {(co,)}")

    def __call__(self, x):
        s = self.spec
        return conv2d(x, self.weight, self.bias, stride=s.stride,
                      padding=s.padding, dilation=s.dilation)

    def parameters(self):
        return [self.weight, self.bias]


class Linear:
    """Affine map ``x @ W.T + b`` over the last axis."""

    def __init__(self, in_dim, out_dim, rng=None, weight=None, bias=None, name="linear"):
        self.in_dim, self.out_dim = in_dim, out_dim
        if weight is None:
            if rng is None:
                raise ValueError("need an rng or explicit weights")
            weight = xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")
        if self.weight.shape != (out_dim, in_dim):
            raise ShapeError(f"weight shape {self.weight.shape} != {(out_dim, in_dim)}")

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


def linear(x, weight, bias):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != {weight.shape[1]}")
    data = x.data @ weight.data.T + bias.data

    def vjp(up):
        gx = up @ weight.data
        if x.ndim == 1:
            gw = np.outer(up, x.data)
            gb = up
        else:
            flat_up = up.reshape(-1, weight.shape[0])
            flat_x = x.data.reshape(-1, weight.shape[1])
            gw = flat_up.T @ flat_x
            gb = flat_up.sum(axis=0)
        return gx, gw, gb

    return _node(data, (x, weight, bias), vjp, "linear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(xp, kernel, stride, dilation, h_out, w_out):
    # view of all kernel taps: (B, C, K, K, Hout, Wout); no copy
    sb, sc, sh, sw = xp.strides
    b, c = xp.shape[:2]
    return as_strided(
        xp,
        shape=(b, c, kernel, kernel, h_out, w_out),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x, weight, bias, stride=1, padding=0, dilation=1):
    """2-d cross-correlation with holes (dilated taps), zero padding.

    ``x`` is ``C x H x W`` or ``B x C x H x W``; ``weight`` is
    ``O x C x K x K``; output spatial extent follows the usual
    floor((H + 2p - d(k-1) - 1)/s) + 1 rule and must stay >= 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[-3] != c:
        raise ShapeError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {c}")
    h, w = x.shape[-2:]
    h_out = conv_out_extent(h, kh, stride, padding, dilation)
    w_out = conv_out_extent(w, kw, stride, padding, dilation)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: degenerate output extent {h_out}x{w_out} "
                         f"for input {h}x{w}")

    xd = x.data if batched else x.data[None]
    b = xd.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, stride, dilation, h_out, w_out)
    # materialize im2col once; both the forward product and the weight
    # gradient reuse it as a plain GEMM operand
    col = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5))
    col = col.reshape(c * kh * kw, b * h_out * w_out)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = (w2 @ col).reshape(o, b, h_out, w_out)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + bias.data[:, None, None]
    if not batched:
        out = out[0]

    def vjp(up):
        upb = up if batched else up[None]
        gb = upb.sum(axis=(0, 2, 3))
        up2 = np.ascontiguousarray(upb.transpose(1, 0, 2, 3))
        up2 = up2.reshape(o, b * h_out * w_out)
        gw = (up2 @ col.T).reshape(o, c, kh, kw)
        if not x.requires_grad:  # e.g. the image itself; skip the col2im work
            return None, gw, gb
        gcol = (w2.T @ up2).reshape(c, kh, kw, b, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :,
                    i * dilation : i * dilation + stride * h_out : stride,
                    j * dilation : j * dilation + stride * w_out : stride,
                    ] += gcol[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if not batched:
            gx = gx[0]
        return np.ascontiguousarray(gx), gw, gb

    return _node(out, (x, weight, bias), vjp, "conv2d")


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def vjp(up):
        return (up * (x.data > 0),)

    return _node(data, (x,), vjp, "relu")


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(up):
        return (up * data * (1.0 - data),)

    return _node(data, (x,), vjp, "sigmoid")


def softmax_channels(x):
    """Per-location softmax over the channel axis of a ``(..,C,H,W)`` map.

    Logits are max-shifted per location, so any finite input yields strictly
    positive probabilities summing to 1 at every (h, w).
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"softmax_channels needs a (..,C,H,W) map, got {x.shape}")
    if x.shape[-3] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.shape[-3]}")
    ax = x.ndim - 3
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)

    def vjp(up):
        dot = (up * data).sum(axis=ax, keepdims=True)
        return (data * (up - dot),)

    return _node(data, (x,), vjp, "softmax_channels")


def maxpool2(x):
    """2x2 max pooling, stride 2; spatial extents must be even."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"maxpool2 needs a (..,C,H,W) map, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    lead = x.shape[:-2]
    h2, w2 = h // 2, w // 2
    v = x.data.reshape(lead + (h2, 2, w2, 2))
    v = v.transpose(tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1, len(lead) + 3))
    v = np.ascontiguousarray(v).reshape(lead + (h2, w2, 4))
    idx = v.argmax(axis=-1)
    data = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def vjp(up):
        g4 = np.zeros(lead + (h2, w2, 4))
        np.put_along_axis(g4, idx[..., None], up[..., None], axis=-1)
        g = g4.reshape(lead + (h2, w2, 2, 2))
        g = g.transpose(tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1, len(lead) + 3))
        return (np.ascontiguousarray(g).reshape(x.shape),)

    return _node(data, (x,), vjp, "maxpool2")


# ---------------------------------------------------------------------------
# loss primitives
# ---------------------------------------------------------------------------

def huber(pred, target):
    """Elementwise smooth-L1: 0.5 d^2 for |d| < 1, |d| - 0.5 beyond."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    small = np.abs(d) < 1.0
    data = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)

    def vjp(up):
        g = up * np.where(small, d, np.sign(d))
        return g, -g

    return _node(data, (pred, target), vjp, "huber")


def smooth_l1(pred, target):
    """Sum of the elementwise smooth-L1 terms, as a scalar."""
    return reduce_sum(huber(pred, target))


def log_softmax_rows(x):
    """Row-wise log-softmax of a 2-d tensor (max-shifted for stability)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-d tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = shifted - lse

    def vjp(up):
        soft = np.exp(data)
        return (up - soft * up.sum(axis=1, keepdims=True),)

    return _node(data, (x,), vjp, "log_softmax_rows")


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of 2-d ``logits`` against integer ``labels``.

    Computed as ``-log_softmax(logits)[i, labels[i]]`` so it stays stable
    for large logits; returns a length-M vector tensor.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= logits.shape[1]:
        raise ShapeError(f"labels out of range [0, {logits.shape[1]})")
    return -1.0 * take_per_row(log_softmax_rows(logits), labels)
