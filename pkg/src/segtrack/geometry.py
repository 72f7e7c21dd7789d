"""Rotated boxes, rasterization, convex polygon clipping and hulls.

Coordinates are continuous image coordinates with pixel centers at integers:
``x`` is the column, ``y`` the row (pointing down).  Angles are measured
from +x toward +y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    s_major: float
    s_minor: float
    angle: float  # radians in [0, pi), direction of the major side

    @classmethod
    def make(cls, cx, cy, side_a, side_b, angle=0.0) -> "RotatedBox":
        """Build from two side lengths, ``side_a`` running along ``angle``."""
        if side_a < side_b:
            side_a, side_b = side_b, side_a
            angle += math.pi / 2
        angle = math.fmod(angle, math.pi)
        if angle < 0:
            angle += math.pi
        if angle >= math.pi:
            angle = 0.0
        return cls(float(cx), float(cy), float(max(side_a, 0.0)), float(max(side_b, 0.0)), float(angle))

    @classmethod
    def from_polygon(cls, pts) -> "RotatedBox":
        """Rotated box of a 4-corner polygon (center = corner mean)."""
        pts = np.asarray(pts, float).reshape(4, 2)
        c = pts.mean(axis=0)
        e1, e2 = pts[1] - pts[0], pts[2] - pts[1]
        return cls.make(c[0], c[1], np.hypot(*e1), np.hypot(*e2), math.atan2(e1[1], e1[0]))

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "RotatedBox":
        return cls.make(x + w / 2.0, y + h / 2.0, w, h, 0.0)

    def with_sides(self, s_major, s_minor) -> "RotatedBox":
        return RotatedBox.make(self.cx, self.cy, s_major, s_minor, self.angle)

    def translated(self, dx, dy) -> "RotatedBox":
        return RotatedBox(self.cx + dx, self.cy + dy, self.s_major, self.s_minor, self.angle)

    def scaled(self, factor, origin=(0.0, 0.0)) -> "RotatedBox":
        ox, oy = origin
        return RotatedBox(ox + (self.cx - ox) * factor, oy + (self.cy - oy) * factor,
                          self.s_major * factor, self.s_minor * factor, self.angle)

    @property
    def area(self) -> float:
        return self.s_major * self.s_minor

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise in a y-up view."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        a = np.array([c, s]) * self.s_major / 2
        b = np.array([-s, c]) * self.s_minor / 2
        ctr = np.array([self.cx, self.cy])
        return np.array([ctr - a - b, ctr + a - b, ctr + a + b, ctr - a + b])

    def contains(self, x, y, tol=0.0):
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = np.asarray(x, float) - self.cx, np.asarray(y, float) - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= self.s_major / 2 + tol) & (np.abs(v) <= self.s_minor / 2 + tol)


# ---------------------------------------------------------------------------
# rasterization: a pixel is inside iff its center is inside


def _slab_interval(a, b, half, rows_dy):
    """dx-interval where |a*dx + b*dy| <= half, per row (a, b scalars)."""
    off = b * rows_dy
    if abs(a) < 1e-12:
        inside = np.abs(off) <= half
        lo = np.where(inside, -np.inf, np.inf)
        hi = np.where(inside, np.inf, -np.inf)
        return lo, hi
    lo = (-half - off) / a
    hi = (half - off) / a
    return np.minimum(lo, hi), np.maximum(lo, hi)


def box_row_spans(box: RotatedBox, shape):
    """Per-row inclusive column spans ``(rows, first, last)`` of the rasterized box."""
    H, W = shape
    c, s = math.cos(box.angle), math.sin(box.angle)
    r = 0.5 * math.hypot(box.s_major, box.s_minor)
    y0 = max(0, math.ceil(box.cy - r))
    y1 = min(H - 1, math.floor(box.cy + r))
    rows = np.arange(y0, y1 + 1)
    if rows.size == 0:
        return rows, rows, rows
    dy = rows - box.cy
    lo1, hi1 = _slab_interval(c, s, box.s_major / 2, dy)
    lo2, hi2 = _slab_interval(-s, c, box.s_minor / 2, dy)
    lo = np.maximum(lo1, lo2) + box.cx
    hi = np.minimum(hi1, hi2) + box.cx
    with np.errstate(invalid="ignore"):
        first = np.clip(np.ceil(lo), 0, W)
        last = np.clip(np.floor(hi), -1, W - 1)
    first = np.nan_to_num(first, nan=W, posinf=W, neginf=0).astype(int)
    last = np.nan_to_num(last, nan=-1, posinf=W - 1, neginf=-1).astype(int)
    return rows, first, last


def rasterize_box(box: RotatedBox, shape) -> np.ndarray:
    mask = np.zeros(shape, bool)
    rows, first, last = box_row_spans(box, shape)
    for r, a, b in zip(rows, first, last):
        if b >= a:
            mask[r, a:b + 1] = True
    return mask


def rasterize_polygon(points, shape) -> np.ndarray:
    """Pixel-center rasterization of a convex polygon."""
    pts = np.asarray(points, float)
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W]
    inside = np.ones(shape, bool)
    sign = np.sign(polygon_signed_area(pts)) or 1.0
    for p, q in zip(pts, np.roll(pts, -1, axis=0)):
        cross = (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
        inside &= sign * cross >= -1e-9
    return inside


# ---------------------------------------------------------------------------
# polygons


def polygon_signed_area(pts) -> float:
    pts = np.asarray(pts, float)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(pts) -> float:
    return abs(polygon_signed_area(pts))


def _ccw(pts):
    pts = np.asarray(pts, float)
    return pts if polygon_signed_area(pts) >= 0 else pts[::-1]


def clip_convex(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex ``clipper``."""
    output = list(map(tuple, _ccw(subject)))
    clip = _ccw(clipper)
    for a, b in zip(clip, np.roll(clip, -1, axis=0)):
        if not output:
            break
        inp, output = output, []

        def side(p):
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

        def cut(p, q):
            sp, sq = side(p), side(q)
            t = sp / (sp - sq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        prev = inp[-1]
        for cur in inp:
            if side(cur) >= 0:
                if side(prev) < 0:
                    output.append(cut(prev, cur))
                output.append(cur)
            elif side(prev) >= 0:
                output.append(cut(prev, cur))
            prev = cur
    return np.array(output, float).reshape(-1, 2)


def convex_polygon_iou(p, q) -> float:
    inter = polygon_area(clip_convex(p, q))
    union = polygon_area(p) + polygon_area(q) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# hulls and minimum-area rectangles


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns counter-clockwise hull vertices."""
    pts = sorted(set(map(tuple, np.asarray(points, float))))
    if len(pts) <= 2:
        return np.array(pts, float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], float)


def min_area_rect(points) -> RotatedBox:
    """Minimum-area enclosing rectangle.

    The optimum has a side collinear with a hull edge, so every edge
    direction of the hull is tried (the calipers' stopping positions).
    """
    hull = convex_hull(points)
    if len(hull) == 1:
        return RotatedBox(hull[0, 0], hull[0, 1], 0.0, 0.0, 0.0)
    if len(hull) == 2:
        d = hull[1] - hull[0]
        c = hull.mean(axis=0)
        return RotatedBox.make(c[0], c[1], float(np.hypot(*d)), 0.0, math.atan2(d[1], d[0]))
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    best = None
    for theta in angles:
        c, s = math.cos(theta), math.sin(theta)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0]:
            best = (area, theta, u.min(), u.max(), v.min(), v.max())
    _, theta, u0, u1, v0, v1 = best
    c, s = math.cos(theta), math.sin(theta)
    uc, vc = (u0 + u1) / 2, (v0 + v1) / 2
    return RotatedBox.make(uc * c - vc * s, uc * s + vc * c, u1 - u0, v1 - v0, theta)
