"""Benchmark measures: region overlap, reset protocol, AO/SR/precision, DAVIS J and F.

Regions are :class:`RotatedBox` objects, boolean masks, or ``None`` (no
prediction, treated as empty).
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import RotatedBox, convex_polygon_iou, rasterize_box

SKIP_FRAMES = 5
BURN_IN = 10
PRECISION_THRESHOLD = 20.0
BOUNDARY_FRACTION = 0.008
INIT, FAILURE = "init", "failure"


# ---------------------------------------------------------------------------
# overlap


def _is_box(r):
    return isinstance(r, RotatedBox)


def region_area(region) -> float:
    if region is None:
        return 0.0
    if _is_box(region):
        return region.area
    return float(np.count_nonzero(region))


def region_overlap(a, b, shape=None) -> float:
    """IoU of two regions; 0 when both are empty.

    Box-box uses exact convex clipping; when a box meets a mask it is
    rasterized on the mask's pixel grid (``shape`` may be given instead).
    """
    if a is None or b is None:
        return 0.0
    if _is_box(a) and _is_box(b):
        if a.area <= 0 or b.area <= 0:
            return 0.0
        return float(min(1.0, convex_polygon_iou(a.corners(), b.corners())))
    if _is_box(a) or _is_box(b):
        mask = b if _is_box(a) else a
        box = a if _is_box(a) else b
        a, b = rasterize_box(box, np.shape(mask) if shape is None else shape), np.asarray(mask, bool)
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b) / union) if union else 0.0


def region_center(region):
    """Box center or mask centroid (x, y); ``None`` for empty regions."""
    if region is None:
        return None
    if _is_box(region):
        return (region.cx, region.cy)
    ys, xs = np.nonzero(region)
    if xs.size == 0:
        return None
    return (float(xs.mean()), float(ys.mean()))


# ---------------------------------------------------------------------------
# runs


@dataclass
class TrackRun:
    """Per-frame predictions and overlaps plus init/failure events."""

    predictions: list
    ground_truth: list
    events: list = field(default_factory=list)  # (frame, "init" | "failure"), frames increasing
    overlaps: np.ndarray = None  # nan where the frame was not scored (init, skipped)
    name: str = ""

    @property
    def failures(self) -> int:
        return sum(1 for _, kind in self.events if kind == FAILURE)

    def init_frames(self):
        return [f for f, kind in self.events if kind == INIT]


@dataclass
class Sequence:
    """Frames (any indexable of images) with one ground-truth region per frame.

    ``init_regions`` optionally gives the regions trackers are initialized
    from (e.g. masks while scoring against boxes).
    """

    name: str
    frames: object
    ground_truth: list
    init_regions: list = None

    def __len__(self):
        return len(self.ground_truth)

    def init_region(self, f):
        return (self.init_regions or self.ground_truth)[f]


def reset_accuracy(run: TrackRun, burn_in=BURN_IN) -> float:
    """Mean overlap of tracked frames at least ``burn_in`` frames after their initialization.

    Initialization frames, failure frames and skipped frames are never scored.
    """
    failures = {f for f, kind in run.events if kind == FAILURE}
    inits = sorted(run.init_frames())
    vals = []
    for f, ov in enumerate(run.overlaps):
        if np.isnan(ov) or f in failures:
            continue
        k = np.searchsorted(inits, f, side="right") - 1
        if k >= 0 and f - inits[k] >= burn_in:
            vals.append(ov)
    return float(np.mean(vals)) if vals else float("nan")


def run_reset_protocol(tracker_factory, sequence: Sequence, skip=SKIP_FRAMES, burn_in=BURN_IN, observer=None):
    """VOT-style supervised run.

    A frame whose overlap is 0 is a failure; the tracker is re-initialized
    from ground truth ``skip`` frames later.  Accuracy averages the overlaps
    of tracked frames, leaving out ``burn_in`` frames from every
    initialization (the initialization frame included).  ``observer(f,
    tracker)`` is called after every initialization and update.  Returns
    ``(accuracy, failures, run)``.
    """
    n = len(sequence)
    overlaps = np.full(n, np.nan)
    preds = [None] * n
    events = []
    tracker = None
    f = 0
    next_init = 0
    while f < n:
        if f == next_init or tracker is None:
            tracker = tracker_factory()
            tracker.initialize(sequence.frames[f], sequence.init_region(f))
            preds[f] = sequence.ground_truth[f]
            events.append((f, INIT))
            if observer:
                observer(f, tracker)
            f += 1
            continue
        pred = tracker.update(sequence.frames[f])
        if observer:
            observer(f, tracker)
        preds[f] = pred
        ov = region_overlap(pred, sequence.ground_truth[f])
        overlaps[f] = ov
        if ov <= 0.0:
            events.append((f, FAILURE))
            next_init = f + skip
            tracker = None
            f = next_init
            continue
        f += 1
    run = TrackRun(preds, list(sequence.ground_truth), events, overlaps, sequence.name)
    return reset_accuracy(run, burn_in), run.failures, run


def reset_records(run: TrackRun) -> list:
    """Per-frame file records of a reset run: 1 init, 2 failure, 0 skipped, else the prediction."""
    kinds = dict(run.events)
    out, skipping = [], False
    for f, pred in enumerate(run.predictions):
        kind = kinds.get(f)
        if kind == INIT:
            out.append(1)
            skipping = False
        elif kind == FAILURE:
            out.append(2)
            skipping = True
        elif skipping:
            out.append(0)
        else:
            out.append(pred)
    return out


def run_from_records(records, ground_truth, name="") -> TrackRun:
    """Rebuild a run from stored records (see :func:`reset_records`) and score overlaps.

    A record list without status codes is a no-reset run initialized on frame 0.
    """
    if len(records) != len(ground_truth):
        raise ValueError(f"{len(records)} prediction records for {len(ground_truth)} frames")
    n = len(records)
    overlaps = np.full(n, np.nan)
    events, preds = [], [None] * n
    for f, r in enumerate(records):
        if isinstance(r, (int, np.integer)):
            if r == 1:
                events.append((f, INIT))
                preds[f] = ground_truth[f]
            elif r == 2:
                events.append((f, FAILURE))
                overlaps[f] = 0.0
            continue
        preds[f] = r
        if f == 0:
            events.append((0, INIT))
            continue
        overlaps[f] = region_overlap(r, ground_truth[f])
    return TrackRun(preds, list(ground_truth), events, overlaps, name)


def run_no_reset(tracker_factory, sequence: Sequence, observer=None) -> TrackRun:
    """Initialize on the first frame and track to the end."""
    n = len(sequence)
    tracker = tracker_factory()
    tracker.initialize(sequence.frames[0], sequence.init_region(0))
    if observer:
        observer(0, tracker)
    preds = [sequence.ground_truth[0]]
    overlaps = np.full(n, np.nan)
    for f in range(1, n):
        pred = tracker.update(sequence.frames[f])
        if observer:
            observer(f, tracker)
        preds.append(pred)
        overlaps[f] = region_overlap(pred, sequence.ground_truth[f])
    return TrackRun(preds, list(sequence.ground_truth), [(0, INIT)], overlaps, sequence.name)


def average_overlap_sr(run: TrackRun, thresholds=(0.5, 0.75), precision_px=PRECISION_THRESHOLD):
    """AO, SR at each threshold (overlap strictly above), and center precision.

    Frames with a nan overlap (the initialization frame) are left out.
    Returns a dict with keys ``AO``, ``SR0.5``, ``SR0.75``, ``precision``.
    """
    ov = np.asarray(run.overlaps, float)
    valid = ~np.isnan(ov)
    scored = ov[valid]
    out = {"AO": float(scored.mean()) if scored.size else float("nan")}
    for t in thresholds:
        out[f"SR{t:g}"] = float((scored > t).mean()) if scored.size else float("nan")
    hits = []
    for f in np.flatnonzero(valid):
        p, g = region_center(run.predictions[f]), region_center(run.ground_truth[f])
        hits.append(p is not None and g is not None and math.hypot(p[0] - g[0], p[1] - g[1]) <= precision_px)
    out["precision"] = float(np.mean(hits)) if hits else float("nan")
    return out


# ---------------------------------------------------------------------------
# DAVIS region and contour measures


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    m = np.asarray(mask, bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def jaccard(pred, gt) -> float:
    """Pixel IoU; two empty masks count as a perfect match."""
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    union = np.count_nonzero(p | g)
    return 1.0 if union == 0 else float(np.count_nonzero(p & g) / union)


def boundary_f(pred, gt, radius=None) -> float:
    """Contour F-measure with a disk tolerance of ``radius`` pixels.

    ``radius`` defaults to ``ceil(0.008 * image diagonal)``.
    """
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    if radius is None:
        radius = math.ceil(BOUNDARY_FRACTION * math.hypot(*p.shape))
    bp, bg = mask_boundary(p), mask_boundary(g)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    se = disk(radius)
    precision = np.count_nonzero(bp & ndimage.binary_dilation(bg, se)) / n_p if n_p else 1.0
    recall = np.count_nonzero(bg & ndimage.binary_dilation(bp, se)) / n_g if n_g else 1.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def davis_measures(pred_masks, gt_masks, radius=None):
    """Mean J and mean F over aligned mask sequences."""
    pred_masks, gt_masks = list(pred_masks), list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground-truth sequences differ in length")
    if not pred_masks:
        return float("nan"), float("nan")
    J = [jaccard(p, g) for p, g in zip(pred_masks, gt_masks)]
    F = [boundary_f(p, g, radius) for p, g in zip(pred_masks, gt_masks)]
    return float(np.mean(J)), float(np.mean(F))


# ---------------------------------------------------------------------------
# reports


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{float(v):.4f}"


def aggregate(rows, keys, label="sequence", name="ALL"):
    """Mean of each metric over sequences (failures are summed)."""
    out = {label: name}
    for k in keys:
        vals = [r[k] for r in rows if not (isinstance(r[k], float) and math.isnan(r[k]))]
        if k == "failures":
            out[k] = int(sum(vals))
        else:
            out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


def report_csv(rows, keys, label="sequence") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, *keys])
    for r in rows:
        w.writerow([r[label], *(format_value(r[k]) for k in keys)])
    return buf.getvalue()


def report_table(rows, keys, label="sequence") -> str:
    cells = [[label, *keys]] + [[str(r[label]), *(format_value(r[k]) for k in keys)] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parallel_map(fn, items, workers=None):
    """Map over items with a bounded process pool (``SEGTRACK_WORKERS``, default 1 = serial)."""
    items = list(items)
    workers = workers if workers is not None else int(os.environ.get("SEGTRACK_WORKERS", "1"))
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
