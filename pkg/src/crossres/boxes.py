"""Axis-aligned boxes in normalized (cx, cy, w, h) form and overlap measures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Center/size box, each coordinate normalized to its frame (0..1)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def clipped(self) -> "BBox":
        """Intersection with the unit frame (assumes it is non-empty)."""
        x0, y0, x1, y1 = self.corners()
        return BBox.from_corners(max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0))


def _area(x0, y0, x1, y1):
    return (x1 - x0) * (y1 - y0)


def intersection_area(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = _area(*a.corners()) + _area(*b.corners()) - inter
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box covered by neither."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    inter = intersection_area(a, b)
    union = _area(ax0, ay0, ax1, ay1) + _area(bx0, by0, bx1, by1) - inter
    hull = _area(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))
    return inter / union - (hull - union) / hull
