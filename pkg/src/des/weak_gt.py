"""Per-pixel weak segmentation labels derived from bounding boxes alone.

A cell of the label grid takes the class of the smallest-area annotation
whose box contains the cell center, and background (0) when no box does.
No mask annotation is ever needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """One object annotation: class id plus normalized corner coordinates.

    Class 0 is reserved for background, so ``class_id >= 1``.  Coordinates
    use the corner convention with ``xmin < xmax`` and ``ymin < ymax``,
    each in [0, 1].
    """

    class_id: int
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    difficult: bool = False

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate box ({self.xmin}, {self.ymin}, "
                             f"{self.xmax}, {self.ymax})")
        for v in (self.xmin, self.ymin, self.xmax, self.ymax):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"coordinate {v} outside [0, 1]")

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def corners(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass
class SegGrid:
    """Integer label grid; each cell holds a class id in {0..N}."""

    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError(f"label grid must be 2-d, got {self.labels.shape}")
        if self.labels.min(initial=0) < 0:
            raise ValueError("negative label in grid")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


def grid_resolution_for(input_size, stride):
    """Feature-map extent for an input of ``input_size`` pixels: ceil(size/stride)."""
    if input_size < 1 or stride < 1:
        raise ValueError("input_size and stride must be positive")
    return math.ceil(input_size / stride)


def rasterize(boxes, grid_h, grid_w):
    """Paint boxes onto a ``grid_h x grid_w`` label grid.

    Each cell is tested by its center point ``((w + 0.5)/grid_w,
    (h + 0.5)/grid_h)`` with boundary rule ``xmin <= cx < xmax``.  Cells
    covered by several boxes take the smallest-area box's class; exact area
    ties go to the lower class id, then the earlier list position.  Cells
    covered by nothing stay background (0).
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid extents must be positive")
    labels = np.zeros((grid_h, grid_w), dtype=np.int64)
    if not boxes:
        return SegGrid(labels)

    cx = (np.arange(grid_w) + 0.5) / grid_w
    cy = (np.arange(grid_h) + 0.5) / grid_h
    # painter order: lowest priority first, so the highest-priority
    # (smallest area, then lowest class id, then lowest index) wins the cell
    order = sorted(range(len(boxes)),
                   key=lambda i: (boxes[i].area, boxes[i].class_id, i),
                   reverse=True)
    for i in order:
        b = boxes[i]
        inside = ((b.xmin <= cx) & (cx < b.xmax))[None, :] & \
                 ((b.ymin <= cy) & (cy < b.ymax))[:, None]
        labels[inside] = b.class_id
    return SegGrid(labels)
