"""Online tracking loop: initialization, per-frame segmentation and box output.

Per frame a square region of ``context`` times the target size is cropped at
the previous position and resampled to ``crop_size``.  The GIM gives the F,
B and P channels, the correlation filter gives L, the refinement network
turns them into a segmentation, and a rotated box is fitted to its largest
component.  The filter is then updated at the segmentation-based position.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import boxfit, gem, gim, nn
from .features import MODEL_STRIDE, HandcraftedBackbone, SearchRegion, crop_mask, extract_search_region, \
    paste_mask, reduce_features
from .geometry import RotatedBox, rasterize_box
from .model import SegmentationNetwork, TrackerConfig
from .refine import refine_probabilities

log = logging.getLogger(__name__)
MIN_SIDE = 4.0


class TrackerError(RuntimeError):
    pass


@dataclass
class TrackerState:
    gim: gim.GimModel
    dcf: gem.CorrelationFilter
    net: SegmentationNetwork  # read-only
    config: TrackerConfig
    center: tuple  # (x, y) frame coordinates
    size: tuple  # (major, minor) side lengths in frame pixels
    box: RotatedBox  # last reported box
    lost: bool = False
    frame_index: int = 0
    backbone: object = None
    init_mask: np.ndarray = None  # first-frame mask (the proxy mask for box initialization)


@dataclass
class FrameOutput:
    mask: np.ndarray  # (H, W) bool, frame coordinates
    box: RotatedBox
    lost: bool
    probability: np.ndarray = None  # (S, S) target probability in the crop
    region: SearchRegion = None
    dcf_peak: tuple = None  # grid (row, col)


# ---------------------------------------------------------------------------
# helpers


def _backbone(state_or_none):
    return state_or_none if state_or_none is not None else HandcraftedBackbone()


def _grid_mask(crop_bool, grid):
    """Majority-vote grid mask; falls back to the best-covered cell for tiny targets."""
    frac = crop_bool.reshape(grid, MODEL_STRIDE, grid, MODEL_STRIDE).mean(axis=(1, 3))
    mask = frac > 0.5
    if not mask.any() and frac.max() > 0:
        mask = frac >= frac.max()
    return mask


def _analyze(region: SearchRegion, net: SegmentationNetwork, backbone):
    pyramid = backbone(region.image_crop)
    level8 = pyramid.level(MODEL_STRIDE)
    feats, _ = reduce_features(level8, net.params["gim.reduce"], net.params["gim.adjust"])
    gem_feats = nn.conv2d(level8, net.params["gem.project"])
    return pyramid, feats, gem_feats


def _train_filter(gem_feats, region: SearchRegion, center, size, config: TrackerConfig):
    gc, gr = region.to_grid(*center)
    extent = math.sqrt(size[0] * size[1]) / region.scale / MODEL_STRIDE
    return gem.train_dcf(gem_feats, (gr, gc), lam=config.dcf_lambda,
                         sigma=config.dcf_sigma_factor * extent, eta=config.dcf_rate)


def clamp_box(box: RotatedBox, frame_size) -> RotatedBox:
    """Pull a box inside the frame ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``.

    The center is clipped into the frame, then the sides shrink about it
    until every corner is inside.
    """
    W, H = frame_size
    lo = np.array([-0.5, -0.5])
    hi = np.array([W - 0.5, H - 0.5])
    c = np.clip([box.cx, box.cy], lo, hi)
    box = RotatedBox(float(c[0]), float(c[1]), box.s_major, box.s_minor, box.angle)
    ext = np.abs(box.corners() - c).max(axis=0)  # half extents along x and y
    room = np.minimum(hi - c, c - lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(ext > room, room / ext, 1.0)
    factor = float(ratios.min())
    if factor < 1.0:
        box = RotatedBox(box.cx, box.cy, box.s_major * factor, box.s_minor * factor, box.angle)
    return box


def _crop_box_to_frame(box: RotatedBox, region: SearchRegion) -> RotatedBox:
    x, y = region.to_frame(box.cx, box.cy)
    return RotatedBox(float(x), float(y), box.s_major * region.scale, box.s_minor * region.scale, box.angle)


def _frame_box_to_crop(box: RotatedBox, region: SearchRegion) -> RotatedBox:
    u, v = region.to_crop(box.cx, box.cy)
    return RotatedBox(float(u), float(v), box.s_major / region.scale, box.s_minor / region.scale, box.angle)


def _segment(region, pyramid, feats, gem_feats, state_gim, dcf, net, config):
    F, B = gim.similarity_channels(feats, state_gim)
    P = gim.posterior_channel(F, B)
    response, peak = gem.apply_dcf(dcf, gem_feats)
    L = gem.location_channel(peak, response.shape)
    stack = gim.ChannelStack(L, F, B, P).fusion_input(config.drop).astype(np.float32)
    prob = refine_probabilities(stack, [pyramid.level(4), pyramid.level(2)], net.refine)
    return prob[1], peak


# ---------------------------------------------------------------------------
# public API


def initialize(frame, ground_truth, net: SegmentationNetwork, config: TrackerConfig = None,
               backbone=None) -> TrackerState:
    """Build the target models from a first-frame mask or box.

    ``ground_truth`` is a boolean mask of the frame's shape, a
    :class:`RotatedBox`, or an ``(x, y, w, h)`` tuple.  A box is first turned
    into a proxy mask by one segmentation pass.
    """
    config = config or net.config
    backbone = _backbone(backbone)
    frame = np.asarray(frame)
    H, W = frame.shape[:2]
    rng = np.random.default_rng(config.seed)
    caps = (config.foreground_cap, config.background_cap)
    G = config.grid_size

    if isinstance(ground_truth, np.ndarray) and ground_truth.ndim == 2:
        mask = np.asarray(ground_truth, bool)
        if mask.shape != (H, W):
            raise ValueError(f"mask shape {mask.shape} does not match frame {(H, W)}")
        if not mask.any():
            raise ValueError("empty ground-truth mask")
        ys, xs = np.nonzero(mask)
        x0, x1, y0, y1 = xs.min() - 0.5, xs.max() + 0.5, ys.min() - 0.5, ys.max() + 0.5
        box = RotatedBox.make((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, 0.0)
        from_box = False
    else:
        box = ground_truth if isinstance(ground_truth, RotatedBox) else RotatedBox.from_xywh(*ground_truth)
        if not (box.s_major > 0 and box.s_minor > 0):
            raise ValueError(f"degenerate ground-truth box {box}")
        if not (-0.5 <= box.cx <= W - 0.5 and -0.5 <= box.cy <= H - 0.5):
            raise ValueError("ground-truth box center lies outside the frame")
        mask = None
        from_box = True

    center = (box.cx, box.cy)
    size = (max(box.s_major, MIN_SIDE), max(box.s_minor, MIN_SIDE))
    region = extract_search_region(frame, center, size, config.crop_size, config.context)
    pyramid, feats, gem_feats = _analyze(region, net, backbone)
    dcf = _train_filter(gem_feats, region, center, size, config)

    if from_box:
        crop_bool = rasterize_box(_frame_box_to_crop(box, region), (config.crop_size,) * 2)
    else:
        crop_bool = crop_mask(mask, region)
    model = gim.build_gim_model(feats, _grid_mask(crop_bool, G), config.K, caps, rng)

    if from_box:
        # one proxy pass on the initialization region
        prob, _ = _segment(region, pyramid, feats, gem_feats, model, dcf, net, config)
        proxy = boxfit.binarize_largest_component(prob)
        if proxy is not None:
            try:
                model = gim.build_gim_model(feats, _grid_mask(proxy, G), config.K, caps, rng)
                crop_bool = proxy
            except gim.GimError as exc:
                log.debug("proxy mask unusable, keeping box model: %s", exc)
        mask = paste_mask(crop_bool, region)
    return TrackerState(model, dcf, net, config, center, size, clamp_box(box, (W, H)), False, 0, backbone, mask)


def track_frame(state: TrackerState, frame):
    """Segment the target in ``frame``; returns ``(mask, box, state, output)``.

    The state is updated in place (and also returned).
    """
    if state is None or state.gim is None or state.dcf is None:
        raise TrackerError("tracker is not initialized")
    config, net = state.config, state.net
    frame = np.asarray(frame)
    H, W = frame.shape[:2]
    region = extract_search_region(frame, state.center, state.size, config.crop_size, config.context)
    pyramid, feats, gem_feats = _analyze(region, net, state.backbone)
    prob, peak = _segment(region, pyramid, feats, gem_feats, state.gim, state.dcf, net, config)
    crop_fg = boxfit.binarize_largest_component(prob)
    state.frame_index += 1

    if crop_fg is None:
        state.lost = True
        if config.self_update:
            state.dcf = gem.update_dcf(state.dcf, gem_feats, peak)
        out = FrameOutput(np.zeros((H, W), bool), state.box, True, prob, region, peak)
        return out.mask, out.box, state, out

    crop_box = boxfit.fit_box(crop_fg, config.box_method, config.alpha, config.shrink_only)
    box = clamp_box(_crop_box_to_frame(crop_box, region), (W, H))
    mask = paste_mask(crop_fg, region)

    new_center = (box.cx, box.cy)
    s = config.size_smoothing
    fitted = (max(box.s_major, MIN_SIDE), max(box.s_minor, MIN_SIDE))
    state.size = tuple((1 - s) * o + s * f for o, f in zip(state.size, fitted))
    if config.self_update:
        update_at = peak
    else:
        gc, gr = region.to_grid(*new_center)
        update_at = (float(gr), float(gc))
    state.dcf = gem.update_dcf(state.dcf, gem_feats, update_at)
    state.center = new_center
    state.box = box
    state.lost = False
    out = FrameOutput(mask, box, False, prob, region, peak)
    return mask, box, state, out


class Tracker:
    """Convenience wrapper holding weights, config and the per-sequence state."""

    def __init__(self, net: SegmentationNetwork, config: TrackerConfig = None, backbone=None, output="box"):
        if output not in ("box", "mask"):
            raise ValueError("output must be 'box' or 'mask'")
        self.net = net
        self.config = config or net.config
        self.backbone = backbone
        self.output = output
        self.state = None
        self.last = None  # FrameOutput of the latest frame

    def initialize(self, frame, ground_truth) -> TrackerState:
        self.state = initialize(frame, ground_truth, self.net, self.config, self.backbone)
        self.last = FrameOutput(self.state.init_mask, self.state.box, False)
        return self.state

    def track(self, frame) -> FrameOutput:
        if self.state is None:
            raise TrackerError("tracker is not initialized")
        *_, out = track_frame(self.state, frame)
        self.last = out
        return out

    def update(self, frame):
        """Track one frame and return the region kind selected by ``output``."""
        out = self.track(frame)
        return out.mask if self.output == "mask" else out.box
