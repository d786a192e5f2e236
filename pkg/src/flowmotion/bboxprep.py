"""2D boxes from projected 3D corners and the ROI crop that feeds the classifier.

Box coordinates are pixel-edge coordinates: ``Box2D(0, W, 0, H)`` covers a
``W`` x ``H`` image exactly, with ``xmax``/``ymax`` exclusive once rounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DegenerateBoxError
from .flowcore import FlowField, resize_bilinear

ROI_SIZE = 224
EXPAND_FACTOR = 3.0


@dataclass(frozen=True)
class Box2D:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.xmax, self.ymin, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"box has min > max: {coords}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> Tuple[float, float]:
        return (self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2

    def mirrored(self, image_width: float) -> "Box2D":
        """The same box in a horizontally flipped image."""
        return Box2D(image_width - self.xmax, image_width - self.xmin, self.ymin, self.ymax)

    def to_list(self) -> list:
        return [self.xmin, self.xmax, self.ymin, self.ymax]


def box_from_corners(corners: Sequence[Sequence[float]]) -> Box2D:
    """Axis-aligned hull of the 8 projected corners of a 3D box."""
    pts = list(corners)
    if len(pts) != 8:
        raise ValueError(f"expected 8 corner points, got {len(pts)}")
    arr = np.asarray(pts, dtype=np.float64)
    if arr.shape != (8, 2):
        raise ValueError(f"corners must be 8 (x, y) pairs, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("corner coordinates must be finite")
    return Box2D(
        float(arr[:, 0].min()), float(arr[:, 0].max()),
        float(arr[:, 1].min()), float(arr[:, 1].max()),
    )


def _around(cx: float, cy: float, side_x: float, side_y: float) -> Box2D:
    return Box2D(cx - side_x / 2, cx + side_x / 2, cy - side_y / 2, cy + side_y / 2)


def squarify(box: Box2D) -> Box2D:
    """Grow the shorter side to match the longer one, keeping the center."""
    side = max(box.width, box.height)
    if box.width == box.height:
        return box
    cx, cy = box.center
    return _around(cx, cy, side, side)


def expand(box: Box2D, factor: float = EXPAND_FACTOR) -> Box2D:
    if not factor > 0:
        raise ValueError(f"expansion factor must be positive, got {factor}")
    if factor == 1:
        return box
    cx, cy = box.center
    return _around(cx, cy, box.width * factor, box.height * factor)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def pixel_window(box: Box2D) -> Tuple[int, int, int, int]:
    """Integer ``(x0, x1, y0, y1)`` window with exclusive upper edges."""
    return (
        round_half_away(box.xmin), round_half_away(box.xmax),
        round_half_away(box.ymin), round_half_away(box.ymax),
    )


def crop_edge_padded(field: FlowField, box: Box2D) -> FlowField:
    """Cut ``box`` out of ``field``, replicating edge pixels where it overhangs."""
    x0, x1, y0, y1 = pixel_window(box)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBoxError(f"{box} rounds to an empty window {(x0, x1, y0, y1)}")
    cols = np.clip(np.arange(x0, x1), 0, field.width - 1)
    rows = np.clip(np.arange(y0, y1), 0, field.height - 1)
    return FlowField(field.data[np.ix_(rows, cols)])


def roi_box(raw_box: Box2D, factor: float = EXPAND_FACTOR) -> Box2D:
    return expand(squarify(raw_box), factor)


def preprocess_roi(field: FlowField, raw_box: Box2D, size: int = ROI_SIZE) -> FlowField:
    """Squarify, triple, crop with edge padding and resize to ``size`` x ``size``.

    Raises:
        DegenerateBoxError: if ``raw_box`` has zero area.
    """
    if raw_box.width <= 0 or raw_box.height <= 0:
        raise DegenerateBoxError(f"raw box has zero area: {raw_box}")
    crop = crop_edge_padded(field, roi_box(raw_box))
    return resize_bilinear(crop, size, size)


def boxes_overlap(a: Box2D, b: Box2D) -> bool:
    return a.xmin < b.xmax and b.xmin < a.xmax and a.ymin < b.ymax and b.ymin < a.ymax

