"""Boxes, intervals and the overlap ratios every metric and reward is built on.

Boxes are continuous half-open regions ``[x1, x2) x [y1, y2)`` in pixel
coordinates; areas are real-valued, never pixel counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box {self.as_tuple()}: need x1<=x2 and y1<=y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass(frozen=True)
class TemporalInterval:
    t_s: float
    t_e: float

    def __post_init__(self):
        if not self.t_s <= self.t_e:
            raise ValueError(f"invalid interval [{self.t_s}, {self.t_e}]")

    @property
    def length(self) -> float:
        return self.t_e - self.t_s

    def contains(self, t: float) -> bool:
        return self.t_s <= t <= self.t_e


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def overlap_ratio_min(a: BBox, b: BBox) -> float:
    """Intersection over the smaller of the two areas (0 if that area is 0)."""
    smaller = min(a.area, b.area)
    if smaller <= 0:
        return 0.0
    return min(1.0, intersection_area(a, b) / smaller)


def temporal_iou(p: TemporalInterval, g: TemporalInterval) -> float:
    """Length of the overlap divided by the length of the union of two intervals.

    Two identical point intervals score 1; any other zero-length union scores 0.
    """
    inter = max(0.0, min(p.t_e, g.t_e) - max(p.t_s, g.t_s))
    union = p.length + g.length - inter
    if union <= 0:
        return 1.0 if p == g else 0.0
    return min(1.0, inter / union)


def seconds_to_frame(t: float, fps: float) -> int:
    """Nearest sampled frame, halves rounded up."""
    return int(math.floor(t * fps + 0.5))


def interval_frames(interval: TemporalInterval, fps: float) -> range:
    """Frame indices covered by an interval, inclusive at both ends."""
    return range(seconds_to_frame(interval.t_s, fps), seconds_to_frame(interval.t_e, fps) + 1)
