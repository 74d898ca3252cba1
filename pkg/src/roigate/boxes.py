"""Axis-aligned boxes in image pixel coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RoiBox:
    """A region of interest: corners (x1, y1) and (x2, y2), x2 > x1, y2 > y1."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clipped(self, width: float, height: float) -> "RoiBox | None":
        """Intersect with the image rectangle; None if nothing remains."""
        x1 = max(self.x1, 0.0)
        y1 = max(self.y1, 0.0)
        x2 = min(self.x2, float(width))
        y2 = min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            return None
        return RoiBox(x1, y1, x2, y2)


def intersection_area(a: RoiBox, b: RoiBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: RoiBox, b: RoiBox) -> float:
    """Intersection over union, in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sequences, shape (len(a), len(b))."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    A = boxes_to_array(a)
    B = boxes_to_array(b)
    iw = (np.minimum(A[:, None, 2], B[None, :, 2])
          - np.maximum(A[:, None, 0], B[None, :, 0]))
    ih = (np.minimum(A[:, None, 3], B[None, :, 3])
          - np.maximum(A[:, None, 1], B[None, :, 1]))
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)
