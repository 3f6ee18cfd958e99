import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from des.anchors import (
    AnchorBox,
    SourceLayerSpec,
    anchors_to_array,
    center_to_corner,
    corner_to_center,
    decode_boxes,
    encode_boxes,
    gen_anchors,
    iou,
    iou_matrix,
    match_anchors,
)
from des.config import NetConfig
from des.weak_gt import BoundingBox


def enumerate_anchors_oracle(specs, input_size):
    """Independent anchor enumeration used to check gen_anchors."""
    out = []
    for li, spec in enumerate(specs):
        extent = math.ceil(input_size / spec.stride)
        per_cell = []
        for a in spec.aspect_ratios:
            per_cell.append((spec.scale * math.sqrt(a), spec.scale / math.sqrt(a)))
        if spec.extra_scale:
            per_cell.append((spec.extra_scale, spec.extra_scale))
        for row in range(extent):
            for col in range(extent):
                for w, h in per_cell:
                    out.append(((col + 0.5) / extent, (row + 0.5) / extent, w, h, li))
    return out


class TestGenAnchors:
    def test_single_cell_single_anchor(self):
        spec = SourceLayerSpec(stride=64, channels=8, scale=0.5,
                               aspect_ratios=(1.0,), extra_scale=None)
        anchors = gen_anchors([spec], 64)
        assert len(anchors) == 1
        a = anchors[0]
        assert (a.cx, a.cy, a.w, a.h) == (0.5, 0.5, 0.5, 0.5)

    def test_aspect_two_preserves_area(self):
        spec = SourceLayerSpec(stride=64, channels=8, scale=0.3,
                               aspect_ratios=(2.0,), extra_scale=None)
        a = gen_anchors([spec], 64)[0]
        npt.assert_allclose(a.w, 0.3 * math.sqrt(2))
        npt.assert_allclose(a.h, 0.3 / math.sqrt(2))
        npt.assert_allclose(a.w * a.h, 0.09)

    def test_toy_config_count_and_enumeration(self):
        cfg = NetConfig()
        specs = cfg.source_layer_specs()
        anchors = gen_anchors(specs, cfg.input_size)
        # 8x8 map with 4 anchors, then 4x4 and 2x2 with 6
        assert len(anchors) == 8 * 8 * 4 + 4 * 4 * 6 + 2 * 2 * 6 == 376
        oracle = enumerate_anchors_oracle(specs, cfg.input_size)
        assert len(oracle) == len(anchors)
        for got, want in zip(anchors, oracle):
            npt.assert_allclose((got.cx, got.cy, got.w, got.h), want[:4], atol=1e-12)
            assert got.source_layer == want[4]

    def test_empty_specs_rejected(self):
        with pytest.raises(ValueError):
            gen_anchors([], 64)


class TestIou:
    def test_identical_boxes(self):
        assert iou((0.1, 0.1, 0.5, 0.6), (0.1, 0.1, 0.5, 0.6)) == 1.0

    def test_disjoint_boxes(self):
        assert iou((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_hand_geometry_third(self):
        # overlap 0.5x1 = 0.5; union 1 + 1 - 0.5 = 1.5
        v = iou((0.0, 0.0, 1.0, 1.0), (0.5, 0.0, 1.5, 1.0))
        npt.assert_allclose(v, 1.0 / 3.0, atol=1e-12)

    def test_pixel_rasterization_oracle(self):
        a = (0.0, 0.0, 1.0, 1.0)
        b = (0.5, 0.0, 1.5, 1.0)
        n = 600
        xs = (np.arange(n) + 0.5) / n * 1.5
        ys = (np.arange(n) + 0.5) / n * 1.5
        gx, gy = np.meshgrid(xs, ys)

        def inside(box):
            return (box[0] <= gx) & (gx < box[2]) & (box[1] <= gy) & (gy < box[3])

        inter = (inside(a) & inside(b)).sum()
        union = (inside(a) | inside(b)).sum()
        npt.assert_allclose(iou(a, b), inter / union, atol=2e-3)

    def test_degenerate_box_zero(self):
        assert iou((0.2, 0.2, 0.2, 0.4), (0.0, 0.0, 1.0, 1.0)) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.01, 0.2),
           st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.01, 0.2))
    def test_symmetric_and_bounded(self, x0, y0, s0, x1, y1, s1):
        a = (x0, y0, x0 + s0, y0 + s0)
        b = (x1, y1, x1 + s1, y1 + s1)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(0)
        a = np.sort(rng.uniform(0, 1, size=(4, 2, 2)), axis=2).reshape(4, 4)[:, [0, 2, 1, 3]]
        b = np.sort(rng.uniform(0, 1, size=(5, 2, 2)), axis=2).reshape(5, 4)[:, [0, 2, 1, 3]]
        m = iou_matrix(a, b)
        for i in range(4):
            for j in range(5):
                npt.assert_allclose(m[i, j], iou(a[i], b[j]), atol=1e-12)


class TestEncodeDecode:
    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        anchors = np.column_stack([rng.uniform(0.2, 0.8, 50), rng.uniform(0.2, 0.8, 50),
                                   rng.uniform(0.05, 0.4, 50), rng.uniform(0.05, 0.4, 50)])
        boxes = np.column_stack([rng.uniform(0.2, 0.8, 50), rng.uniform(0.2, 0.8, 50),
                                 rng.uniform(0.05, 0.4, 50), rng.uniform(0.05, 0.4, 50)])
        back = decode_boxes(encode_boxes(boxes, anchors), anchors)
        npt.assert_allclose(back, boxes, atol=1e-10)

    def test_zero_offsets_decode_to_anchor(self):
        anchors = np.array([[0.5, 0.5, 0.2, 0.3]])
        back = decode_boxes(np.zeros((1, 4)), anchors)
        npt.assert_allclose(back, anchors, atol=1e-15)

    def test_corner_center_roundtrip(self):
        rng = np.random.default_rng(2)
        c = np.column_stack([rng.uniform(0.3, 0.7, 20), rng.uniform(0.3, 0.7, 20),
                             rng.uniform(0.05, 0.3, 20), rng.uniform(0.05, 0.3, 20)])
        npt.assert_allclose(corner_to_center(center_to_corner(c)), c, atol=1e-12)


def brute_force_matcher(anchors_center, gt_boxes, thresh):
    """Independent matcher: per-anchor argmax scan plus explicit forcing."""
    a_corner = center_to_corner(anchors_center)
    n = len(anchors_center)
    labels = np.zeros(n, dtype=int)
    owner = np.full(n, -1)
    best_iou = np.zeros(n)
    for i in range(n):
        for g, gt in enumerate(gt_boxes):
            ov = iou(a_corner[i], gt.corners())
            if ov > best_iou[i]:
                best_iou[i], owner[i] = ov, g
    forced = {}
    for g, gt in enumerate(gt_boxes):
        best, arg = -1.0, -1
        for i in range(n):
            ov = iou(a_corner[i], gt.corners())
            if ov > best:
                best, arg = ov, i
        forced[arg] = g  # later boxes override, same as the implementation
    for i in range(n):
        g = forced.get(i, owner[i] if best_iou[i] >= thresh else -1)
        labels[i] = gt_boxes[g].class_id if g >= 0 else 0
    return labels


class TestMatchAnchors:
    def _anchors(self):
        cfg = NetConfig()
        return anchors_to_array(gen_anchors(cfg.source_layer_specs(), cfg.input_size))

    def test_gt_identical_to_anchor(self):
        anchors = self._anchors()
        target = anchors[37]
        corner = center_to_corner(target[None])[0]
        gt = [BoundingBox(2, *np.clip(corner, 0, 1))]
        m = match_anchors(anchors, gt)
        assert m.labels[37] == 2
        npt.assert_allclose(m.loc_targets[37], 0.0, atol=1e-9)

    def test_no_gt_all_background(self):
        m = match_anchors(self._anchors(), [])
        assert (m.labels == 0).all()
        assert (m.gt_index == -1).all()

    def test_every_gt_box_claims_an_anchor(self):
        rng = np.random.default_rng(3)
        anchors = self._anchors()
        for _ in range(20):
            gts = []
            for _ in range(rng.integers(1, 5)):
                x0, y0 = rng.uniform(0, 0.7, 2)
                gts.append(BoundingBox(int(rng.integers(1, 4)), x0, y0,
                                       x0 + rng.uniform(0.05, 0.3),
                                       y0 + rng.uniform(0.05, 0.3)))
            m = match_anchors(anchors, gts)
            assert set(range(len(gts))) <= set(m.gt_index[m.gt_index >= 0].tolist())

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        anchors = self._anchors()
        for _ in range(10):
            gts = []
            for _ in range(rng.integers(0, 4)):
                x0, y0 = rng.uniform(0, 0.6, 2)
                gts.append(BoundingBox(int(rng.integers(1, 4)), x0, y0,
                                       x0 + rng.uniform(0.08, 0.35),
                                       y0 + rng.uniform(0.08, 0.35)))
            m = match_anchors(anchors, gts)
            oracle = brute_force_matcher(anchors, gts, 0.5)
            npt.assert_array_equal(m.labels, oracle)

    def test_positive_iou_or_forced(self):
        rng = np.random.default_rng(5)
        anchors = self._anchors()
        corners = center_to_corner(anchors)
        gts = [BoundingBox(1, 0.1, 0.1, 0.32, 0.35),
               BoundingBox(2, 0.5, 0.5, 0.9, 0.95)]
        m = match_anchors(anchors, gts)
        best_per_gt = {g: int(np.argmax([iou(c, gts[g].corners()) for c in corners]))
                       for g in range(2)}
        for i in np.flatnonzero(m.labels > 0):
            ov = iou(corners[i], gts[m.gt_index[i]].corners())
            assert ov >= 0.5 or i in best_per_gt.values()

    def test_encoded_targets_recover_gt(self):
        anchors = self._anchors()
        gt = [BoundingBox(1, 0.2, 0.2, 0.5, 0.6)]
        m = match_anchors(anchors, gt)
        pos = np.flatnonzero(m.labels > 0)
        decoded = center_to_corner(decode_boxes(m.loc_targets[pos], anchors[pos]))
        npt.assert_allclose(decoded, np.tile([0.2, 0.2, 0.5, 0.6], (len(pos), 1)),
                            atol=1e-9)

    def test_needs_anchors(self):
        with pytest.raises(ValueError):
            match_anchors(np.zeros((0, 4)), [])


def test_anchor_box_fields():
    a = AnchorBox(0.5, 0.5, 0.1, 0.2, source_layer=1, scale=0.15, aspect_ratio=0.5)
    arr = anchors_to_array([a])
    npt.assert_array_equal(arr, [[0.5, 0.5, 0.1, 0.2]])
