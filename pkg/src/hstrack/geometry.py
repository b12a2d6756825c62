"""Axis-aligned bounding boxes in center form, plus conversions."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    """Box stored as center (cx, cy) and size (w, h), all in pixels.

    On-disk ground-truth files use the tracking-community top-left
    ``x,y,w,h`` convention; use :meth:`from_xywh` / :meth:`to_xywh` to
    convert.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box field: {self!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive: w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def clamped_to(self, width: float, height: float) -> "BoundingBox":
        """Clamp the box so it lies inside a (width x height) frame."""
        w = min(self.w, width)
        h = min(self.h, height)
        cx = min(max(self.cx, w / 2.0), width - w / 2.0)
        cy = min(max(self.cy, h / 2.0), height - h / 2.0)
        return BoundingBox(cx, cy, w, h)


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)
