"""Plain 2-D geometry over normalized image coordinates.

Boxes are stored center-size (cx, cy, w, h); corner form is derived on demand.
Everything here works on python floats and is side-effect free.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

DEGENERATE_EPS = 1e-9
LINE_MIN_LENGTH = 1e-6


class DegenerateVector(ValueError):
    """A direction vector has (near) zero length."""


class MissingKeypoint(KeyError):
    """A pose lacks a keypoint required to build a gesture line."""


class GestureKind(str, enum.Enum):
    VTL = "vtl"  # eye -> fingertip
    EWL = "ewl"  # elbow -> wrist


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __sub__(self, other: Point2) -> tuple[float, float]:
        return (self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class BoxCXYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> BoxCXYWH:
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class GestureLine:
    proximal: Point2  # eye (VTL) or elbow (EWL)
    distal: Point2    # fingertip (VTL) or wrist (EWL)
    kind: GestureKind

    def __post_init__(self):
        dx, dy = self.distal - self.proximal
        if math.hypot(dx, dy) <= LINE_MIN_LENGTH:
            raise DegenerateVector("gesture line endpoints coincide")

    def direction(self) -> tuple[float, float]:
        return self.distal - self.proximal


def box_center(b: BoxCXYWH) -> Point2:
    return Point2(b.cx, b.cy)


def cosine_between(u: tuple[float, float], v: tuple[float, float]) -> float:
    nu = math.hypot(*u)
    nv = math.hypot(*v)
    if nu <= DEGENERATE_EPS or nv <= DEGENERATE_EPS:
        raise DegenerateVector(f"zero-length vector in cosine: |u|={nu:.3g} |v|={nv:.3g}")
    c = (u[0] * v[0] + u[1] * v[1]) / (nu * nv)
    return max(-1.0, min(1.0, c))


def cosine_colinearity(line: GestureLine, target: Point2) -> float:
    """Cosine of the angle at ``line.proximal`` between the line and ``target``."""
    return cosine_between(line.direction(), target - line.proximal)


def _intersection_union(a: BoxCXYWH, b: BoxCXYWH) -> tuple[float, float]:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter, a.area + b.area - inter


def iou(a: BoxCXYWH, b: BoxCXYWH) -> float:
    inter, union = _intersection_union(a, b)
    return inter / union


def enclosing_box(a: BoxCXYWH, b: BoxCXYWH) -> BoxCXYWH:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return BoxCXYWH.from_corners(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))


def giou(a: BoxCXYWH, b: BoxCXYWH) -> float:
    inter, union = _intersection_union(a, b)
    hull = enclosing_box(a, b).area
    return inter / union - (hull - union) / hull


def make_gesture_line(pose, kind: GestureKind | str) -> GestureLine:
    """Build the gesture line of ``kind`` from a pose with optional keypoints.

    ``pose`` is anything exposing ``eye``, ``fingertip``, ``elbow`` and ``wrist``
    attributes (``None`` when a keypoint is not visible).
    """
    kind = GestureKind(kind)
    names = ("eye", "fingertip") if kind is GestureKind.VTL else ("elbow", "wrist")
    pts = []
    for name in names:
        p = getattr(pose, name, None)
        if p is None:
            raise MissingKeypoint(f"pose has no {name!r} keypoint required for {kind.value.upper()}")
        pts.append(p)
    return GestureLine(pts[0], pts[1], kind)
