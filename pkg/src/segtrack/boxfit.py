"""Segmentation mask -> rotated bounding box.

The initial box comes from a least-squares ellipse fitted to the outline of
the largest connected component; its two sides are then tuned by coordinate
descent on the modified overlap

    IoU_mod = N_in_pos / (alpha * N_in_neg + N_in_pos + N_out_pos)

with the center and angle held fixed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import RotatedBox, box_row_spans, min_area_rect

log = logging.getLogger(__name__)

ALPHA = 0.25
STEPS = (0.95, 1.05)
MAX_EVALUATIONS = 200
EIGHT_CONNECTED = np.ones((3, 3), bool)
MIN_OUTLINE_PIXELS = 6


@dataclass(frozen=True)
class BoxFitStats:
    n_in_pos: int
    n_in_neg: int
    n_out_pos: int
    alpha: float


def binarize_largest_component(prob, threshold=0.5):
    """Foreground = target probability > threshold, largest 8-connected blob.

    ``prob`` is the (2, H, W) probability map or an (H, W) target map.  Returns
    a boolean mask, or ``None`` when nothing is above threshold (target lost).
    """
    p = np.asarray(prob)
    fg = (p[1] if p.ndim == 3 else p) > threshold
    labels, n = ndimage.label(fg, structure=EIGHT_CONNECTED)
    if n == 0:
        return None
    if n == 1:
        return fg
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


# ---------------------------------------------------------------------------
# ellipse fit


class DegenerateFit(ValueError):
    pass


def _foreground_crop(mask):
    """Tight crop around the foreground and its (row, col) offset."""
    m = np.asarray(mask, bool)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return m[:0, :0], (0, 0)
    cols = np.flatnonzero(m[rows[0]:rows[-1] + 1].any(axis=0))
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1], (int(rows[0]), int(cols[0]))


def _boundary_edges(mask):
    """For each 4-neighbour direction, foreground pixels whose neighbour is background."""
    crop, (r0, c0) = _foreground_crop(mask)
    m = np.pad(crop, 1)
    inner = m[1:-1, 1:-1]
    edges = []
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        neighbour = m[1 + dy:m.shape[0] - 1 + dy, 1 + dx:m.shape[1] - 1 + dx]
        edges.append((dy, dx, inner & ~neighbour))
    return edges, (r0, c0)


def _outline(mask):
    """Outline pixel count and boundary edge midpoints (x, y)."""
    edges, (r0, c0) = _boundary_edges(mask)
    if edges[0][2].size == 0:
        return 0, np.zeros((0, 2))
    count = int(np.logical_or.reduce([e for _, _, e in edges]).sum())
    pts = []
    for dy, dx, e in edges:
        ys, xs = np.nonzero(e)
        pts.append(np.stack([xs + c0 + dx / 2.0, ys + r0 + dy / 2.0], axis=1))
    return count, np.concatenate(pts)


def outline_pixel_count(mask) -> int:
    """Foreground pixels with at least one 4-neighbour in the background."""
    return _outline(mask)[0]


def outline_points(mask) -> np.ndarray:
    """(x, y) midpoints of every foreground/background pixel edge.

    These lie on the region boundary itself rather than half a pixel inside
    it, which keeps the fitted axes unbiased.
    """
    return _outline(mask)[1]


def ellipse_from_points(points):
    """Direct least-squares ellipse (conic constrained to 4AC - B^2 = 1).

    Uses the numerically stable block decomposition of the scatter matrix.
    Returns ``(cx, cy, semi_major, semi_minor, angle)``.
    """
    pts = np.asarray(points, float)
    if len(pts) < 6:
        raise DegenerateFit("need at least 6 outline points")
    mean = pts.mean(axis=0)
    scale = np.sqrt(((pts - mean) ** 2).sum(axis=1).mean())
    if not scale > 0:
        raise DegenerateFit("all outline points coincide")
    x, y = ((pts - mean) / scale).T
    D1 = np.stack([x * x, x * y, y * y], axis=1)
    D2 = np.stack([x, y, np.ones_like(x)], axis=1)
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("singular scatter matrix") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    vals, vecs = np.linalg.eig(M)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise DegenerateFit("no elliptical solution")
    a1 = vecs[:, ok[0]]
    A, B, C = a1
    Dc, Ec, Fc = T @ a1
    det = 4 * A * C - B * B
    x0 = (B * Ec - 2 * C * Dc) / det
    y0 = (B * Dc - 2 * A * Ec) / det
    f0 = Fc + (Dc * x0 + Ec * y0) / 2
    lam, ev = np.linalg.eigh(np.array([[A, B / 2], [B / 2, C]]))
    if f0 == 0 or np.any(-f0 / lam <= 0):
        raise DegenerateFit("conic is not a real ellipse")
    semi = np.sqrt(-f0 / lam) * scale
    major = int(np.argmax(semi))
    vx, vy = ev[:, major]
    angle = math.atan2(vy, vx) % math.pi
    return (x0 * scale + mean[0], y0 * scale + mean[1], float(semi[major]), float(semi[1 - major]), angle)


def fit_ellipse(mask) -> RotatedBox:
    """Initial rotated box (center, sides 2a x 2b, major-axis angle).

    Falls back to the minimum-area rectangle when the outline is too small or
    degenerate.
    """
    count, pts = _outline(mask)
    if count < MIN_OUTLINE_PIXELS:
        log.debug("ellipse fit fell back to min-area rectangle: outline too small")
        return min_area_box(mask)
    try:
        cx, cy, a, b, angle = ellipse_from_points(pts)
    except DegenerateFit as exc:
        log.debug("ellipse fit fell back to min-area rectangle: %s", exc)
        return min_area_box(mask)
    return RotatedBox.make(cx, cy, 2 * a, 2 * b, angle)


# ---------------------------------------------------------------------------
# modified overlap


def iou_mod_from_counts(n_in_pos, n_in_neg, n_out_pos, alpha=ALPHA) -> float:
    denom = alpha * n_in_neg + n_in_pos + n_out_pos
    return n_in_pos / denom if denom > 0 else 0.0


class _Counter:
    """Pixel counts of a box against a fixed mask via per-row prefix sums."""

    def __init__(self, mask):
        self.shape = np.shape(mask)
        crop, (self.r0, self.c0) = _foreground_crop(mask)
        self.cumsum = np.zeros((crop.shape[0], crop.shape[1] + 1), np.int64)
        np.cumsum(crop, axis=1, out=self.cumsum[:, 1:])
        self.total_pos = int(self.cumsum[:, -1].sum())

    def counts(self, box):
        rows, first, last = box_row_spans(box, self.shape)
        ok = last >= first
        rows, first, last = rows[ok], first[ok], last[ok]
        inside = int((last - first + 1).sum())
        h, w = self.cumsum.shape[0], self.cumsum.shape[1] - 1
        r = rows - self.r0
        sel = (r >= 0) & (r < h)
        r = r[sel]
        hi = np.clip(last[sel] - self.c0 + 1, 0, w)
        lo = np.clip(first[sel] - self.c0, 0, w)
        in_pos = int((self.cumsum[r, hi] - self.cumsum[r, lo]).sum())
        return in_pos, inside - in_pos, self.total_pos - in_pos


def iou_mod(box: RotatedBox, mask, alpha=ALPHA):
    """Modified overlap of a box against a mask, with the raw counts."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    n_in_pos, n_in_neg, n_out_pos = _Counter(mask).counts(box)
    stats = BoxFitStats(n_in_pos, n_in_neg, n_out_pos, alpha)
    return iou_mod_from_counts(n_in_pos, n_in_neg, n_out_pos, alpha), stats


def fit_rotated_box(mask, alpha=ALPHA, steps=STEPS, max_evaluations=MAX_EVALUATIONS, shrink_only=False,
                    return_info=False):
    """Coordinate descent on the two side lengths from the ellipse box.

    Each axis in turn tries a shrink step, then a grow step (unless
    ``shrink_only``); a step is kept only if it strictly improves IoU_mod.
    Stops after a full pass with no improvement or when the evaluation budget
    is spent.
    """
    if not np.any(mask):
        raise ValueError("cannot fit a box to an empty mask")
    counter = _Counter(mask)
    box = fit_ellipse(mask)
    sides = [box.s_major, box.s_minor]

    def score(s):
        return iou_mod_from_counts(*counter.counts(box.with_sides(*s)), alpha)

    best = score(sides)
    initial = best
    evaluations = 1
    moves = steps[:1] if shrink_only else steps
    improved = True
    while improved and evaluations < max_evaluations:
        improved = False
        for axis in (0, 1):
            for factor in moves:
                if evaluations >= max_evaluations:
                    break
                trial = list(sides)
                trial[axis] *= factor
                value = score(trial)
                evaluations += 1
                if value > best:
                    best, sides, improved = value, trial, True
                    break
    # keep the ellipse orientation even if the sides swap order
    result = RotatedBox(box.cx, box.cy, sides[0], sides[1], box.angle)
    if sides[0] < sides[1]:
        result = RotatedBox.make(box.cx, box.cy, sides[0], sides[1], box.angle)
    if return_info:
        return result, {"initial": initial, "final": best, "evaluations": evaluations}
    return result


# ---------------------------------------------------------------------------
# ablation alternatives


def _pixel_points(mask):
    ys, xs = np.nonzero(mask)
    return np.stack([xs, ys], axis=1).astype(float)


def min_max_box(mask) -> RotatedBox:
    """Tight axis-aligned box through the extreme foreground pixel centers."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask")
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    return RotatedBox.make((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, 0.0)


def min_area_box(mask) -> RotatedBox:
    pts = _pixel_points(mask)
    if len(pts) == 0:
        raise ValueError("empty mask")
    return min_area_rect(pts)


def alternative_boxes(mask, kind: str) -> RotatedBox:
    if kind == "min_max":
        return min_max_box(mask)
    if kind == "min_area":
        return min_area_box(mask)
    raise ValueError(f"unknown box kind {kind!r}")


def fit_box(mask, method="iou_mod", alpha=ALPHA, shrink_only=False) -> RotatedBox:
    """Dispatch for the tracker's box-fit variants."""
    if method == "iou_mod":
        return fit_rotated_box(mask, alpha, shrink_only=shrink_only)
    if method == "ellipse":
        return fit_ellipse(mask)
    return alternative_boxes(mask, method)
