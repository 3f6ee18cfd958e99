"""The single-shot detector: backbone, enrichment wiring, prediction heads,
multibox loss with hard negative mining, and decode + NMS inference."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import (
    anchors_to_array,
    center_to_corner,
    decode_boxes,
    gen_anchors,
    iou_matrix,
    match_anchors,
)
from .config import ConfigError, NetConfig
from .global_activation import GlobalActivationBlock
from .layers import Conv2d, ConvSpec, maxpool2, relu, softmax_cross_entropy, huber
from .seg_branch import SegBranch
from .tensor import Tensor


def _layer_rng(seed, name):
    # one stream per layer name: shared layers get identical weights across
    # variants built from the same seed
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class NetworkOutput:
    """Flattened predictions plus, when the variant has one, the
    segmentation branch products for the first source layer."""

    class_logits: Tensor          # (A, K+1) or (B, A, K+1)
    box_offsets: Tensor           # (A, 4) or (B, A, 4)
    seg: object = None            # SegBranchOutput or None
    source_features: list = field(default_factory=list)  # raw per-layer taps


class Network:
    """Builds every layer named by the config and wires the variant."""

    def __init__(self, cfg: NetConfig, params=None):
        cfg.validate()
        self.cfg = cfg
        k1 = cfg.num_classes + 1
        self._params = {}

        def conv(name, spec):
            layer = Conv2d(spec, _layer_rng(cfg.seed, name), name=name)
            self._params[f"{name}.weight"] = layer.weight
            self._params[f"{name}.bias"] = layer.bias
            return layer

        self.stem = []
        c = 3
        for i, w in enumerate(cfg.stem_widths):
            self.stem.append(conv(f"stem{i}", ConvSpec(c, w, 3, padding=1)))
            c = w
        self.source_convs = []
        for i, w in enumerate(cfg.source_widths):
            self.source_convs.append(conv(f"source{i}", ConvSpec(c, w, 3, padding=1)))
            c = w

        self.seg = None
        if cfg.variant in ("GS", "GS_parallel"):
            first_c = cfg.source_widths[0]
            self.seg = SegBranch(
                first_c, cfg.num_classes, _layer_rng(cfg.seed, "seg"),
                trunk_width=cfg.seg_trunk_width,
                feature_width=cfg.seg_feature_width,
                sigmoid_gate=cfg.seg_sigmoid_gate,
                gate_bias_init=cfg.seg_gate_bias_init, name="seg")
            for i, a in enumerate(self.seg.atrous):
                self._params[f"seg.atrous{i}.weight"] = a.weight
                self._params[f"seg.atrous{i}.bias"] = a.bias
            for sub, layer in (("trunk", self.seg.trunk),
                               ("class_head", self.seg.class_head),
                               ("gate_head", self.seg.gate_head)):
                self._params[f"seg.{sub}.weight"] = layer.weight
                self._params[f"seg.{sub}.bias"] = layer.bias

        self.ga_blocks = []
        if cfg.variant != "baseline":
            for i, w in enumerate(cfg.source_widths):
                block = GlobalActivationBlock(w, _layer_rng(cfg.seed, f"ga{i}"),
                                              name=f"ga{i}")
                self._params[f"ga{i}.squeeze.weight"] = block.squeeze.weight
                self._params[f"ga{i}.squeeze.bias"] = block.squeeze.bias
                self._params[f"ga{i}.excite.weight"] = block.excite.weight
                self._params[f"ga{i}.excite.bias"] = block.excite.bias
                self.ga_blocks.append(block)

        self.class_heads, self.box_heads = [], []
        self.layer_specs = cfg.source_layer_specs()
        for i, spec in enumerate(self.layer_specs):
            a = spec.anchors_per_cell
            self.class_heads.append(conv(f"class_head{i}",
                                         ConvSpec(spec.channels, k1 * a, 3, padding=1)))
            self.box_heads.append(conv(f"box_head{i}",
                                       ConvSpec(spec.channels, 4 * a, 3, padding=1)))

        self.anchor_boxes = gen_anchors(self.layer_specs, cfg.input_size)
        self.anchor_array = anchors_to_array(self.anchor_boxes)
        self.anchor_corners = center_to_corner(self.anchor_array)

        if params is not None:
            self.load_state(params)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        return dict(self._params)

    def parameters(self):
        return list(self._params.values())

    def load_state(self, arrays):
        for name, tensor in self._params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ConfigError(f"parameter {name!r}: checkpoint shape "
                                  f"{arr.shape} != model shape {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr)

    # -- forward ------------------------------------------------------------

    def forward(self, images):
        """Run the detector; accepts ``3 x H x W`` or a batched stack."""
        x = T.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[-3] != 3 or x.shape[-2:] != (self.cfg.input_size,) * 2:
            raise ConfigError(f"input shape {x.shape[-3:]} does not match "
                              f"3x{self.cfg.input_size}x{self.cfg.input_size}")

        for layer in self.stem:
            x = maxpool2(relu(layer(x)))

        k1 = self.cfg.num_classes + 1
        cls_parts, box_parts, raw_feats = [], [], []
        seg_out = None
        for i, layer in enumerate(self.source_convs):
            x = maxpool2(relu(layer(x)))
            raw_feats.append(x)
            if i == 0 and self.seg is not None:
                seg_out = self.seg.forward(x, activate=self.cfg.variant == "GS")
                x = seg_out.activated
            if self.ga_blocks:
                x = self.ga_blocks[i](x)
            a = self.layer_specs[i].anchors_per_cell
            b, _, h, w = x.shape
            cls = self.class_heads[i](x)
            cls = T.reshape(cls, (b, a, k1, h, w))
            cls = T.transpose(cls, (0, 3, 4, 1, 2))
            cls_parts.append(T.reshape(cls, (b, h * w * a, k1)))
            box = self.box_heads[i](x)
            box = T.reshape(box, (b, a, 4, h, w))
            box = T.transpose(box, (0, 3, 4, 1, 2))
            box_parts.append(T.reshape(box, (b, h * w * a, 4)))

        cls_logits = T.concat(cls_parts, axis=1)
        box_offsets = T.concat(box_parts, axis=1)
        if single:
            cls_logits = T.reshape(cls_logits, cls_logits.shape[1:])
            box_offsets = T.reshape(box_offsets, box_offsets.shape[1:])
            if seg_out is not None:
                seg_out.class_probs = T.reshape(seg_out.class_probs,
                                                seg_out.class_probs.shape[1:])
                seg_out.activation = T.reshape(seg_out.activation,
                                               seg_out.activation.shape[1:])
                seg_out.activated = T.reshape(seg_out.activated,
                                              seg_out.activated.shape[1:])
        return NetworkOutput(cls_logits, box_offsets, seg_out, raw_feats)

    def match(self, boxes):
        return match_anchors(self.anchor_array, boxes,
                             iou_threshold=self.cfg.match_iou,
                             variances=self.cfg.variances)


def build_network(cfg: NetConfig) -> Network:
    """Validate the config and assemble the network it describes."""
    return Network(cfg)


# ---------------------------------------------------------------------------
# multibox loss
# ---------------------------------------------------------------------------

def det_loss(class_logits, box_offsets, match, neg_pos_ratio=3):
    """Single-image multibox loss.

    Softmax confidence loss over the positives plus hard-mined negatives
    (``neg_pos_ratio`` negatives per positive, picked by descending
    background cross-entropy), plus smooth-L1 on the positives' offsets,
    normalized by the positive count.  An image with no positives falls
    back to the mean background cross-entropy over all anchors, keeping a
    training signal without a localization term.
    """
    cls = T.as_tensor(class_logits)
    box = T.as_tensor(box_offsets)
    if cls.ndim != 2 or box.ndim != 2:
        raise T.ShapeError("det_loss takes single-image (A, K+1) and (A, 4) inputs")
    return det_loss_batch(T.reshape(cls, (1,) + cls.shape),
                          T.reshape(box, (1,) + box.shape),
                          [match], neg_pos_ratio)


def det_loss_batch(class_logits, box_offsets, matches, neg_pos_ratio=3):
    """Mean of per-image multibox losses over a batch (see :func:`det_loss`)."""
    b, n_anchors, k1 = class_logits.shape
    if n_anchors == 0:
        raise T.ShapeError("det_loss needs at least one anchor")
    if len(matches) != b:
        raise T.ShapeError(f"{len(matches)} match results for batch of {b}")

    flat_cls = T.reshape(class_logits, (b * n_anchors, k1))
    flat_box = T.reshape(box_offsets, (b * n_anchors, 4))

    # mining runs on detached values; only the selected rows join the tape
    logits = flat_cls.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    bg_ce = np.log(np.exp(shifted).sum(axis=1)) - shifted[:, 0]

    sel_rows, sel_labels, sel_weights = [], [], []
    pos_rows, pos_weights, pos_targets = [], [], []
    for i, m in enumerate(matches):
        base = i * n_anchors
        pos = np.flatnonzero(m.labels > 0)
        neg = np.flatnonzero(m.labels == 0)
        n_pos = len(pos)
        if n_pos == 0:
            sel_rows.append(base + np.arange(n_anchors))
            sel_labels.append(np.zeros(n_anchors, dtype=np.int64))
            sel_weights.append(np.full(n_anchors, 1.0 / (n_anchors * b)))
            continue
        n_neg = min(neg_pos_ratio * n_pos, len(neg))
        order = np.argsort(-bg_ce[base + neg], kind="stable")[:n_neg]
        picked = neg[order]
        rows = np.concatenate([pos, picked])
        sel_rows.append(base + rows)
        sel_labels.append(np.concatenate([m.labels[pos],
                                          np.zeros(n_neg, dtype=np.int64)]))
        sel_weights.append(np.full(len(rows), 1.0 / (n_pos * b)))
        pos_rows.append(base + pos)
        pos_weights.append(np.full(n_pos, 1.0 / (n_pos * b)))
        pos_targets.append(m.loc_targets[pos])

    ce = softmax_cross_entropy(T.index_rows(flat_cls, np.concatenate(sel_rows)),
                               np.concatenate(sel_labels))
    loss = T.reduce_sum(T.mul(ce, np.concatenate(sel_weights)))
    if pos_rows:
        hub = huber(T.index_rows(flat_box, np.concatenate(pos_rows)),
                    Tensor(np.concatenate(pos_targets)))
        w = np.concatenate(pos_weights)[:, None]
        loss = T.add(loss, T.reduce_sum(T.mul(hub, w)))
    return loss


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    """One decoded, scored output box (corner coordinates, clipped to [0,1])."""

    class_id: int
    score: float
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def corners(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)


def nms_greedy(boxes, scores, iou_thresh):
    """Greedy NMS keep-list: descending score (stable ties), suppress any
    box whose IoU with a kept box exceeds ``iou_thresh``."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    overlaps = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_thresh
    return keep


def decode_nms(class_probs, box_offsets, anchors, score_thresh=0.01,
               nms_iou=0.45, top_k=200, variances=(0.1, 0.2)):
    """Turn raw per-anchor predictions into a final detection list.

    Offsets are decoded against the anchors and clipped to the unit square;
    each foreground class is thresholded and NMS-suppressed independently,
    then the union is cut to the ``top_k`` highest scores.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    offsets = np.asarray(box_offsets, dtype=np.float64)
    anchors_center = anchors if isinstance(anchors, np.ndarray) else anchors_to_array(anchors)
    if probs.shape[0] != offsets.shape[0] or probs.shape[0] != anchors_center.shape[0]:
        raise ValueError("probs, offsets and anchors disagree on anchor count")
    decoded = center_to_corner(decode_boxes(offsets, anchors_center, variances))
    decoded = np.clip(decoded, 0.0, 1.0)

    results = []
    for c in range(1, probs.shape[1]):
        scores = probs[:, c]
        mask = np.flatnonzero(scores >= score_thresh)
        if mask.size == 0:
            continue
        keep = nms_greedy(decoded[mask], scores[mask], nms_iou)
        for j in keep:
            idx = mask[j]
            results.append(Detection(c, float(scores[idx]), *decoded[idx]))
    results.sort(key=lambda d: -d.score)
    return results[:top_k]


def detect(net, image, score_thresh=None, nms_iou=None, top_k=None):
    """Forward one image without recording gradients and decode detections."""
    cfg = net.cfg
    with T.no_grad():
        out = net.forward(image)
        logits = out.class_logits.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    return decode_nms(
        probs, out.box_offsets.data, net.anchor_array,
        score_thresh=cfg.score_thresh if score_thresh is None else score_thresh,
        nms_iou=cfg.nms_iou if nms_iou is None else nms_iou,
        top_k=cfg.top_k if top_k is None else top_k,
        variances=cfg.variances)
