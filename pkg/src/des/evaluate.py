"""Detection-quality evaluation: per-class average precision at IoU 0.5
under the greedy one-match-per-ground-truth protocol, with all-points
(area-under-monotonized-PR-curve) interpolation."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .anchors import iou
from .detector import detect


def thread_count():
    """Parallelism cap from the DES_THREADS environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("DES_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EvalReport:
    """Per-class AP, their mean over classes with ground truth, timing, and
    the raw per-image detection dumps.

    AP and mAP are bit-reproducible for a fixed checkpoint and dataset;
    ``mean_time_ms`` obviously is not.
    """

    per_class_ap: dict
    mean_ap: float
    mean_time_ms: float
    num_images: int
    detections: list = field(default_factory=list, repr=False)
    ap_rule: str = "all-points"

    def to_dict(self, class_names=None):
        def label(c):
            return class_names[c] if class_names and c < len(class_names) else str(c)

        return {
            "mAP": self.mean_ap,
            "ap_rule": self.ap_rule,
            "iou_threshold": 0.5,
            "per_class_ap": {label(c): ap for c, ap in self.per_class_ap.items()},
            "mean_time_ms": self.mean_time_ms,
            "num_images": self.num_images,
            "detections": [
                [{"class": d.class_id, "score": d.score,
                  "box": [d.xmin, d.ymin, d.xmax, d.ymax]} for d in dets]
                for dets in self.detections
            ],
        }


def average_precision(scores, is_tp, num_gt):
    """All-points AP from parallel score/hit arrays and the ground-truth count.

    Detections are ranked by descending score (ties keep their original
    order); precision is monotonized from the right and integrated over
    recall.
    """
    if num_gt == 0:
        raise ValueError("average_precision needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = is_tp[order].astype(np.float64)
    fp = 1.0 - tp
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections_to_gt(detections, gt_boxes, iou_thresh=0.5):
    """Greedy matching for one image and one class.

    Returns a TP flag per detection (in the given order, assumed ranked):
    a detection is TP when its best-IoU ground truth clears the threshold
    and was not already claimed; matches to ``difficult`` ground truth are
    ignored entirely (flag None).
    """
    used = [False] * len(gt_boxes)
    flags = []
    for det in detections:
        best, best_g = 0.0, -1
        for g, gt in enumerate(gt_boxes):
            ov = iou(det.corners(), gt.corners())
            if ov > best:
                best, best_g = ov, g
        if best >= iou_thresh and best_g >= 0:
            if gt_boxes[best_g].difficult:
                flags.append(None)
            elif not used[best_g]:
                used[best_g] = True
                flags.append(True)
            else:
                flags.append(False)
        else:
            flags.append(False)
    return flags


def score_detections(all_dets, samples, num_classes, iou_thresh=0.5):
    """Pool per-image detections into per-class AP and mAP.

    Per class: detections from every image are ranked by score, greedily
    matched (one per ground truth, difficult boxes excluded from both the
    positive pool and the penalty), and integrated into an all-points AP.
    mAP averages the classes that have at least one non-difficult
    ground-truth instance; classes without any are reported as None.
    """
    per_class = {}
    for c in range(1, num_classes + 1):
        num_gt = sum(1 for s in samples
                     for b in s.boxes if b.class_id == c and not b.difficult)
        if num_gt == 0:
            per_class[c] = None
            continue
        scores, flags = [], []
        for img_idx, dets in enumerate(all_dets):
            cls_dets = sorted((d for d in dets if d.class_id == c),
                              key=lambda d: -d.score)
            gt = [b for b in samples[img_idx].boxes if b.class_id == c]
            for det, flag in zip(cls_dets, match_detections_to_gt(cls_dets, gt, iou_thresh)):
                if flag is None:
                    continue
                scores.append(det.score)
                flags.append(flag)
        per_class[c] = average_precision(scores, flags, num_gt)

    scored = [ap for ap in per_class.values() if ap is not None]
    mean_ap = float(np.mean(scored)) if scored else 0.0
    return per_class, mean_ap


def evaluate(net, samples, iou_thresh=0.5, score_thresh=None, threads=None):
    """Run a detector over a dataset and score it (see :func:`score_detections`)."""
    workers = threads if threads is not None else thread_count()

    def run(sample):
        t0 = time.perf_counter()
        dets = detect(net, sample.image, score_thresh=score_thresh)
        return dets, (time.perf_counter() - t0) * 1000.0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, samples))
    else:
        outcomes = [run(s) for s in samples]
    all_dets = [o[0] for o in outcomes]
    times = [o[1] for o in outcomes]

    per_class, mean_ap = score_detections(all_dets, samples,
                                          net.cfg.num_classes, iou_thresh)
    return EvalReport(per_class_ap=per_class, mean_ap=mean_ap,
                      mean_time_ms=float(np.mean(times)) if times else 0.0,
                      num_images=len(samples), detections=all_dets)
