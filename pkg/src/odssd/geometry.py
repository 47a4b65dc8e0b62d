"""Axis-aligned boxes, IoU, and the object-disparity formula.

Object disparity is the (dx, dy) displacement of a whole object between
the left and right views of a stereo pair, computed from its two bounding
boxes. Boxes truncated at an image edge fall back from the center formula
to the matching opposite-edge difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBoxError(ValueError):
    """Raised for non-finite or out-of-range box coordinates."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in view pixel coordinates, corner form."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for v in (self.xmin, self.ymin, self.xmax, self.ymax):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite box coordinate: {self}")
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise InvalidBoxError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def cx(self) -> float:
        return (self.xmin + self.xmax) / 2.0

    @property
    def cy(self) -> float:
        return (self.ymin + self.ymax) / 2.0

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)

    def clamped(self, view_w: float, view_h: float) -> "BBox":
        return BBox(
            min(max(self.xmin, 0.0), view_w),
            min(max(self.ymin, 0.0), view_h),
            min(max(self.xmax, 0.0), view_w),
            min(max(self.ymax, 0.0), view_h),
        )


@dataclass(frozen=True)
class ObjectDisparity:
    """Signed per-object displacement between left and right views, pixels."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise InvalidBoxError(f"non-finite disparity: {self}")


@dataclass(frozen=True)
class StereoObject:
    """A labeled object with paired left/right boxes and its disparity.

    Both boxes are in their own view's coordinate frame.
    """

    label: str
    left_box: BBox
    right_box: BBox
    disparity: ObjectDisparity


def _check_in_view(box: BBox, view_w: float, view_h: float, name: str) -> None:
    if box.xmin < 0 or box.ymin < 0 or box.xmax > view_w or box.ymax > view_h:
        raise InvalidBoxError(
            f"{name} box {box} outside view {view_w}x{view_h}"
        )


def object_disparity(
    lbox: BBox, rbox: BBox, view_w: float, view_h: float
) -> ObjectDisparity:
    """Compute object disparity (dx, dy) from left/right view boxes.

    Edge-truncated objects use the visible opposite edge instead of the
    center: if either box touches the left image edge, dx is the
    difference of right edges; if either touches the right image edge,
    dx is the difference of left edges; otherwise dx is the center
    difference. dy is handled symmetrically with the top/bottom edges.
    The left-edge branch is checked first, so a box spanning the full
    width takes it.
    """
    if view_w <= 0 or view_h <= 0:
        raise InvalidBoxError(f"invalid view size {view_w}x{view_h}")
    _check_in_view(lbox, view_w, view_h, "left")
    _check_in_view(rbox, view_w, view_h, "right")

    if lbox.xmin == 0 or rbox.xmin == 0:
        dx = lbox.xmax - rbox.xmax
    elif lbox.xmax == view_w or rbox.xmax == view_w:
        dx = lbox.xmin - rbox.xmin
    else:
        dx = (lbox.xmin + lbox.xmax) / 2.0 - (rbox.xmin + rbox.xmax) / 2.0

    if lbox.ymin == 0 or rbox.ymin == 0:
        dy = lbox.ymax - rbox.ymax
    elif lbox.ymax == view_h or rbox.ymax == view_h:
        dy = lbox.ymin - rbox.ymin
    else:
        dy = (lbox.ymin + lbox.ymax) / 2.0 - (rbox.ymin + rbox.ymax) / 2.0

    return ObjectDisparity(dx, dy)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when the union is empty."""
    ix = max(0.0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
    iy = max(0.0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union
