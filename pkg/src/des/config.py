"""Architecture and training configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .anchors import SourceLayerSpec

VARIANTS = ("baseline", "G", "GS", "GS_parallel")


class ConfigError(ValueError):
    """Inconsistent configuration; the message names the offending field."""


@dataclass
class NetConfig:
    """Everything needed to build and train one detector.

    The backbone is a chain of 3x3 conv + ReLU + 2x2 maxpool stages:
    ``stem_widths`` stages first, then one stage per entry of
    ``source_widths`` whose outputs are the prediction source layers
    (strides double at every stage).  ``variant`` selects which semantic
    enrichment is wired in: nothing, channel gating on every source layer
    (``G``), gating plus the segmentation branch on the first source layer
    (``GS``), or the branch trained in parallel without activating the
    features (``GS_parallel``).
    """

    input_size: int = 64
    num_classes: int = 3
    stem_widths: tuple = (16, 32)
    source_widths: tuple = (64, 64, 64)
    variant: str = "GS"
    alpha: float = 0.1
    seg_trunk_width: int | None = None
    seg_feature_width: int | None = None
    seg_sigmoid_gate: bool = False
    seg_gate_bias_init: float = 1.0
    scale_min: float = 0.15
    scale_max: float = 0.75
    first_aspects: tuple = (1.0, 2.0, 0.5)
    rest_aspects: tuple = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)
    match_iou: float = 0.5
    neg_pos_ratio: int = 3
    variances: tuple = (0.1, 0.2)
    lr_schedule: tuple = ((1e-3, 2000), (1e-4, 500), (1e-5, 500))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 8
    flip_augment: bool = True
    seed: int = 0
    score_thresh: float = 0.01
    nms_iou: float = 0.45
    top_k: int = 200
    checkpoint_every: int = 0

    def __post_init__(self):
        self.stem_widths = tuple(self.stem_widths)
        self.source_widths = tuple(self.source_widths)
        self.first_aspects = tuple(self.first_aspects)
        self.rest_aspects = tuple(self.rest_aspects)
        self.variances = tuple(self.variances)
        self.lr_schedule = tuple((float(lr), int(n)) for lr, n in self.lr_schedule)

    # -- validation ---------------------------------------------------------

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: {self.variant!r} not one of {VARIANTS}")
        if self.alpha < 0:
            raise ConfigError(f"alpha: must be non-negative, got {self.alpha}")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule: must have at least one phase")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes: must be >= 1, got {self.num_classes}")
        if not self.source_widths:
            raise ConfigError("source_widths: need at least one source layer")
        pools = len(self.stem_widths) + len(self.source_widths)
        if self.input_size % (1 << pools) != 0:
            raise ConfigError(f"input_size: {self.input_size} not divisible by "
                              f"2^{pools} (one 2x2 pool per stage)")
        if self.variant != "baseline":
            for i, w in enumerate(self.source_widths):
                if w % 4 != 0:
                    raise ConfigError(f"source_widths[{i}]: {w} not divisible by 4 "
                                      f"(required by the gating bottleneck)")
        if not (0 < self.match_iou <= 1):
            raise ConfigError(f"match_iou: {self.match_iou} outside (0, 1]")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be positive, got {self.batch_size}")
        return self

    # -- derived geometry ---------------------------------------------------

    @property
    def first_source_stride(self):
        return 1 << (len(self.stem_widths) + 1)

    @property
    def source_strides(self):
        base = len(self.stem_widths)
        return tuple(1 << (base + 1 + i) for i in range(len(self.source_widths)))

    @property
    def seg_grid_size(self):
        return self.input_size // self.first_source_stride

    def anchor_scales(self):
        n = len(self.source_widths)
        if n == 1:
            step = self.scale_max - self.scale_min
            return [self.scale_min], step if step > 0 else self.scale_min
        step = (self.scale_max - self.scale_min) / (n - 1)
        return [self.scale_min + i * step for i in range(n)], step

    def source_layer_specs(self):
        scales, step = self.anchor_scales()
        specs = []
        for i, (width, stride) in enumerate(zip(self.source_widths, self.source_strides)):
            aspects = self.first_aspects if i == 0 else self.rest_aspects
            nxt = scales[i + 1] if i + 1 < len(scales) else scales[i] + step
            extra = (scales[i] * nxt) ** 0.5
            specs.append(SourceLayerSpec(stride=stride, channels=width,
                                         scale=scales[i], aspect_ratios=tuple(aspects),
                                         extra_scale=extra))
        return specs

    @property
    def total_iterations(self):
        return sum(n for _, n in self.lr_schedule)

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self):
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        p = Path(source)
        text = p.read_text() if p.exists() else str(source)
        return cls.from_dict(json.loads(text))

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return NetConfig.from_dict(d)
