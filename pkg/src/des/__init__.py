"""Desk-scale single-shot object detection with semantic feature enrichment.

The library is organized around a small float64 autodiff core
(:mod:`des.tensor`, :mod:`des.layers`), the two enrichment mechanisms
(:mod:`des.seg_branch`, :mod:`des.global_activation`), bounding-box-derived
weak segmentation labels (:mod:`des.weak_gt`), the detector itself with
anchors, matching, loss and NMS (:mod:`des.anchors`, :mod:`des.detector`),
and training/evaluation utilities (:mod:`des.train`, :mod:`des.evaluate`,
:mod:`des.ablation`).  The ``des`` console command exposes the workflows.
"""

from .anchors import (
    AnchorBox,
    MatchResult,
    SourceLayerSpec,
    decode_boxes,
    encode_boxes,
    gen_anchors,
    iou,
    match_anchors,
)
from .config import ConfigError, NetConfig
from .data import DatasetManifest, Sample, gen_synthetic, read_ppm, write_ppm
from .detector import Detection, Network, build_network, decode_nms, det_loss, detect
from .evaluate import EvalReport, average_precision, evaluate
from .gradcheck import GradCheckError, finite_difference_check
from .global_activation import GlobalActivationBlock, global_activate
from .layers import (
    Conv2d,
    ConvSpec,
    Linear,
    conv2d,
    maxpool2,
    relu,
    sigmoid,
    smooth_l1,
    softmax_channels,
)
from .seg_branch import SegBranch, SegBranchOutput, parallel_variant_forward, seg_forward, seg_loss
from .serialize import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .tensor import ShapeError, Tensor, backward, mul as elementwise_mul, no_grad, reduce_mean
from .train import SGD, TrainingDiverged, sgd_step, total_loss, train
from .weak_gt import BoundingBox, SegGrid, grid_resolution_for, rasterize

__version__ = "0.1.0"
