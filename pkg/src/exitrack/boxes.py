"""Axis-aligned boxes and plain-array overlap helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIZE = 1e-3


@dataclass(frozen=True)
class BoundingBox:
    """Box in normalized coordinates of some reference square (center + size)."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def is_valid(self) -> bool:
        return 0 < self.w <= 1 and 0 < self.h <= 1 and 0 <= self.cx <= 1 and 0 <= self.cy <= 1

    def clamped(self) -> "BoundingBox":
        """Nearest box satisfying ``w, h in (0, 1]`` and ``cx, cy in [0, 1]``."""
        w = float(np.clip(abs(self.w), MIN_SIZE, 1.0))
        h = float(np.clip(abs(self.h), MIN_SIZE, 1.0))
        return BoundingBox(float(np.clip(self.cx, 0, 1)), float(np.clip(self.cy, 0, 1)), w, h)


def xywh_to_corners(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def iou_corners(a, b) -> np.ndarray:
    """IoU for ``[..., 4]`` corner-form arrays; 0 for empty unions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou_xywh(a, b) -> np.ndarray:
    return iou_corners(xywh_to_corners(a), xywh_to_corners(b))


def center_distance_xywh(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca = a[..., :2] + a[..., 2:] / 2
    cb = b[..., :2] + b[..., 2:] / 2
    return np.linalg.norm(ca - cb, axis=-1)
