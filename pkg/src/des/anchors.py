"""Anchor (default box) generation, IoU geometry, ground-truth matching and
the center-size offset encoding used by the box regression heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2


@dataclass(frozen=True)
class AnchorBox:
    """A prior box in normalized center-size coordinates."""

    cx: float
    cy: float
    w: float
    h: float
    source_layer: int
    scale: float
    aspect_ratio: float


@dataclass(frozen=True)
class SourceLayerSpec:
    """One prediction source layer: geometry plus anchor recipe.

    ``extra_scale``, when set, adds one square anchor of that scale on top
    of the ``aspect_ratios`` list (conventionally the geometric mean of this
    layer's scale and the next).
    """

    stride: int
    channels: int
    scale: float
    aspect_ratios: tuple
    extra_scale: float | None = None

    @property
    def anchors_per_cell(self):
        return len(self.aspect_ratios) + (1 if self.extra_scale else 0)

    def map_extent(self, input_size):
        return math.ceil(input_size / self.stride)


def gen_anchors(specs, input_size):
    """Tile anchors over every source layer's feature map.

    Per cell, one anchor per aspect ratio at the layer scale (w = s*sqrt(a),
    h = s/sqrt(a), area preserved) plus the optional extra square anchor.
    Enumeration order is row, column, then anchor index, matching how the
    prediction heads are flattened.
    """
    if not specs:
        raise ValueError("need at least one source layer spec")
    anchors = []
    for layer_idx, spec in enumerate(specs):
        extent = spec.map_extent(input_size)
        shapes = [(spec.scale * math.sqrt(a), spec.scale / math.sqrt(a), spec.scale, a)
                  for a in spec.aspect_ratios]
        if spec.extra_scale:
            shapes.append((spec.extra_scale, spec.extra_scale, spec.extra_scale, 1.0))
        for row in range(extent):
            cy = (row + 0.5) / extent
            for col in range(extent):
                cx = (col + 0.5) / extent
                for w, h, scale, aspect in shapes:
                    anchors.append(AnchorBox(cx, cy, w, h, layer_idx, scale, aspect))
    return anchors


def anchors_to_array(anchors):
    """Stack anchors into an (A, 4) center-size array."""
    return np.array([[a.cx, a.cy, a.w, a.h] for a in anchors], dtype=np.float64)


def center_to_corner(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corner_to_center(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def iou(a, b):
    """Intersection over union of two corner boxes; 0 for degenerate input."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU of two corner-box arrays, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(gt_center, anchors_center,
                 variances=(CENTER_VARIANCE, SIZE_VARIANCE)):
    """Center-size log offsets of ground-truth boxes relative to anchors."""
    g = np.asarray(gt_center, dtype=np.float64)
    a = np.asarray(anchors_center, dtype=np.float64)
    vc, vs = variances
    d_center = (g[..., :2] - a[..., :2]) / (a[..., 2:] * vc)
    d_size = np.log(g[..., 2:] / a[..., 2:]) / vs
    return np.concatenate([d_center, d_size], axis=-1)


def decode_boxes(offsets, anchors_center,
                 variances=(CENTER_VARIANCE, SIZE_VARIANCE)):
    """Invert :func:`encode_boxes`; returns center-size boxes."""
    o = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchors_center, dtype=np.float64)
    vc, vs = variances
    centers = o[..., :2] * vc * a[..., 2:] + a[..., :2]
    sizes = np.exp(o[..., 2:] * vs) * a[..., 2:]
    return np.concatenate([centers, sizes], axis=-1)


@dataclass
class MatchResult:
    """Per-anchor assignment produced by :func:`match_anchors`.

    ``labels[i]`` is 0 for background, otherwise the matched box's class.
    ``gt_index[i]`` is -1 for background.  ``loc_targets`` holds encoded
    regression offsets (meaningful only where ``labels > 0``).
    """

    labels: np.ndarray
    gt_index: np.ndarray
    loc_targets: np.ndarray

    @property
    def positive_mask(self):
        return self.labels > 0

    @property
    def num_positives(self):
        return int(self.positive_mask.sum())


def match_anchors(anchors, gt_boxes, iou_threshold=0.5,
                  variances=(CENTER_VARIANCE, SIZE_VARIANCE)):
    """Assign each anchor to background or to one ground-truth box.

    Every ground-truth box unconditionally claims its highest-IoU anchor,
    so no box goes unmatched; beyond that, any anchor overlapping some box
    at or above ``iou_threshold`` is positive for its best box.
    """
    if isinstance(anchors, np.ndarray):
        anchors_center = anchors
    else:
        anchors_center = anchors_to_array(anchors)
    n = anchors_center.shape[0]
    if n == 0:
        raise ValueError("need at least one anchor")
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    loc = np.zeros((n, 4), dtype=np.float64)
    if not gt_boxes:
        return MatchResult(labels, gt_index, loc)

    anchors_corner = center_to_corner(anchors_center)
    gt_corner = np.array([b.corners() for b in gt_boxes], dtype=np.float64)
    overlaps = iou_matrix(gt_corner, anchors_corner)  # (G, A)

    best_gt = overlaps.argmax(axis=0)
    best_gt_iou = overlaps[best_gt, np.arange(n)]
    # force-match: each box claims its best anchor, overriding thresholds
    # (and each other, in box order, so the rule stays deterministic)
    for g in range(len(gt_boxes)):
        a_star = int(overlaps[g].argmax())
        best_gt[a_star] = g
        best_gt_iou[a_star] = 2.0

    positive = best_gt_iou >= iou_threshold
    labels[positive] = np.array([gt_boxes[g].class_id for g in best_gt[positive]])
    gt_index[positive] = best_gt[positive]
    if positive.any():
        matched = corner_to_center(gt_corner[best_gt[positive]])
        loc[positive] = encode_boxes(matched, anchors_center[positive], variances)
    return MatchResult(labels, gt_index, loc)
