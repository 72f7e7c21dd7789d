"""Search-region extraction and the hand-crafted backbone substitute.

The backbone produces 13 base channels per crop pixel (RGB, horizontal and
vertical grayscale gradients, 8-bin soft orientation histogram) and
average-pools them to strides 2, 4 and 8.  The stride-8 level is the model
resolution shared by the GIM and GEM pathways.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn

STRIDES = (2, 4, 8)
MODEL_STRIDE = 8
N_ORIENT = 8
BASE_CHANNELS = 3 + 2 + N_ORIENT
CONTEXT = 4.0


@dataclass
class SearchRegion:
    image_crop: np.ndarray  # (3, S, S) float in [0, 1]
    center_in_frame: tuple
    scale: float  # frame pixels per crop pixel
    frame_size: tuple  # (W, H)

    @property
    def crop_size(self) -> int:
        return self.image_crop.shape[-1]

    def to_frame(self, u, v):
        """Crop pixel coordinates (column u, row v) -> frame (x, y)."""
        half = self.crop_size / 2.0
        cx, cy = self.center_in_frame
        return cx + (np.asarray(u) + 0.5 - half) * self.scale, cy + (np.asarray(v) + 0.5 - half) * self.scale

    def to_crop(self, x, y):
        half = self.crop_size / 2.0
        cx, cy = self.center_in_frame
        return (np.asarray(x) - cx) / self.scale + half - 0.5, (np.asarray(y) - cy) / self.scale + half - 0.5

    def to_grid(self, x, y):
        """Frame (x, y) -> model-grid (column, row), cell centers at integers."""
        u, v = self.to_crop(x, y)
        return (u - (MODEL_STRIDE - 1) / 2) / MODEL_STRIDE, (v - (MODEL_STRIDE - 1) / 2) / MODEL_STRIDE

    def grid_to_frame(self, gc, gr):
        return self.to_frame(gc * MODEL_STRIDE + (MODEL_STRIDE - 1) / 2, gr * MODEL_STRIDE + (MODEL_STRIDE - 1) / 2)


@dataclass
class FeaturePyramid:
    levels: list  # arrays (C, S/stride, S/stride), strides 2, 4, 8
    strides: tuple = STRIDES

    def level(self, stride: int) -> np.ndarray:
        return self.levels[self.strides.index(stride)]

    @property
    def channels(self) -> list:
        return [lv.shape[0] for lv in self.levels]


def region_side(target_size, context=CONTEXT) -> float:
    w, h = target_size
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate target size {target_size}")
    return context * float(np.sqrt(w * h))


def _as_float_image(frame):
    img = np.asarray(frame)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)



def _affine_sample(img2d, region_center, scale, size, order):
    # crop pixel (v, u) samples frame at (cy + (v + .5 - S/2) s, cx + (u + .5 - S/2) s)
    cx, cy = region_center
    off = 0.5 - size / 2.0
    offset = (cy + off * scale, cx + off * scale)
    return ndimage.affine_transform(img2d, np.diag([scale, scale]), offset=offset, output_shape=(size, size),
                                    order=order, mode="nearest")


def extract_search_region(frame, target_center, target_size, crop_size=384, context=CONTEXT) -> SearchRegion:
    """Square crop of side ``context * sqrt(w*h)`` resampled to ``crop_size``; edges replicate."""
    side = region_side(target_size, context)
    if crop_size % MODEL_STRIDE:
        raise ValueError("crop size must be a multiple of the model stride")
    img = _as_float_image(frame)
    scale = side / crop_size
    crop = np.stack([_affine_sample(img[..., c], target_center, scale, crop_size, 1) for c in range(3)])
    return SearchRegion(crop.astype(np.float32), (float(target_center[0]), float(target_center[1])),
                        float(scale), (img.shape[1], img.shape[0]))


def crop_mask(mask, region: SearchRegion) -> np.ndarray:
    """Nearest-neighbour resample of a frame mask into crop coordinates."""
    m = np.asarray(mask).astype(np.float32)
    cx, cy = region.center_in_frame
    s = region.scale
    S = region.crop_size
    # out-of-frame replication would invent foreground; use zero there
    out = ndimage.affine_transform(m, np.diag([s, s]), offset=(cy + (0.5 - S / 2) * s, cx + (0.5 - S / 2) * s),
                                   output_shape=(S, S), order=0, mode="constant", cval=0.0)
    return out > 0.5


def paste_mask(crop_mask_arr, region: SearchRegion) -> np.ndarray:
    """Map a crop-space mask back to a frame-sized boolean mask."""
    W, H = region.frame_size
    S = region.crop_size
    s = region.scale
    cx, cy = region.center_in_frame
    inv = 1.0 / s
    # frame pixel (y, x) -> crop (v, u) = ((y - cy)/s + S/2 - .5, ...)
    offset = (-cy * inv + S / 2 - 0.5, -cx * inv + S / 2 - 0.5)
    out = ndimage.affine_transform(np.asarray(crop_mask_arr, np.float32), np.diag([inv, inv]), offset=offset,
                                   output_shape=(H, W), order=0, mode="constant", cval=0.0)
    return out > 0.5


# ---------------------------------------------------------------------------
# base channels and pyramid


def base_channels(crop: np.ndarray) -> np.ndarray:
    """(3, H, W) crop -> (13, H, W): RGB, gx, gy, soft orientation histogram."""
    rgb = np.asarray(crop, dtype=np.float32)
    gray = rgb.mean(axis=0)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / N_ORIENT)
    lo = np.floor(pos).astype(int) % N_ORIENT
    hi = (lo + 1) % N_ORIENT
    frac = pos - np.floor(pos)
    bins = np.arange(N_ORIENT)[:, None, None]
    hist = (lo == bins) * (mag * (1 - frac)) + (hi == bins) * (mag * frac)
    return np.concatenate([rgb, gx[None], gy[None], hist]).astype(np.float32)


def _pool2(x):
    return 0.25 * (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2])


def avg_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Mean over non-overlapping ``stride`` x ``stride`` blocks (power-of-two strides)."""
    if stride & (stride - 1):
        c, h, w = x.shape
        return x.reshape(c, h // stride, stride, w // stride, stride).mean(axis=(2, 4))
    while stride > 1:
        x = _pool2(x)
        stride //= 2
    return x


class HandcraftedBackbone:
    """Color + gradient-orientation channels, average pooled per stride."""

    channels = BASE_CHANNELS

    def __call__(self, crop: np.ndarray) -> FeaturePyramid:
        levels, x, stride = [], base_channels(crop), 1
        for s in STRIDES:
            x = avg_pool(x, s // stride)
            stride = s
            levels.append(x)
        return FeaturePyramid(levels)


class PrecomputedBackbone:
    """Serves pyramids from tensor files, one file per frame per level.

    Files are named ``{prefix}{index:05d}_s{stride}.bin`` in the tensor format
    of :mod:`segtrack.nn`, each holding a single tensor.  Frames are served in
    call order.
    """

    def __init__(self, directory, prefix="frame"):
        self.directory = Path(directory)
        self.prefix = prefix
        self.index = 0
        first = self._load(0)
        self.channels = first.levels[0].shape[0]

    def _load(self, index):
        levels = []
        for s in STRIDES:
            tensors = nn.load_tensors(self.directory / f"{self.prefix}{index:05d}_s{s}.bin")
            levels.append(next(iter(tensors.values())))
        return FeaturePyramid(levels)

    def __call__(self, crop):
        pyr = self._load(self.index)
        self.index += 1
        S = crop.shape[-1]
        for s, lv in zip(STRIDES, pyr.levels):
            if lv.shape[1:] != (S // s, S // s):
                raise ValueError(f"precomputed stride-{s} level has shape {lv.shape}, crop is {S}")
        return pyr


def save_pyramid(directory, index, pyramid: FeaturePyramid, prefix="frame") -> None:
    directory = Path(directory)
    for s, lv in zip(pyramid.strides, pyramid.levels):
        nn.save_tensors(directory / f"{prefix}{index:05d}_s{s}.bin", {f"stride{s}": lv})


# ---------------------------------------------------------------------------
# trainable reduction (GIM branch) and the fixed GEM projection


def reduce_features(level8: np.ndarray, reduce: nn.LayerParams, adjust: nn.LayerParams):
    """1x1 reduction + ReLU, then 3x3 adjustment + ReLU.  Returns (features, cache)."""
    a = nn.conv2d(level8, reduce)
    r = nn.relu(a)
    b = nn.conv2d(r, adjust)
    return nn.relu(b), (level8, a, r, b)


def reduce_features_backward(grad, cache, reduce: nn.LayerParams, adjust: nn.LayerParams):
    level8, a, r, b = cache
    g = nn.conv2d_backward(nn.relu_backward(grad, b), r, adjust)
    return nn.conv2d_backward(nn.relu_backward(g, a), level8, reduce)


def compute_feature_pyramid(region: SearchRegion, reduce: nn.LayerParams, adjust: nn.LayerParams,
                            backbone=None):
    """Pyramid of the crop plus the reduced model-resolution GIM features."""
    backbone = backbone or HandcraftedBackbone()
    pyramid = backbone(region.image_crop)
    feats, _ = reduce_features(pyramid.level(MODEL_STRIDE), reduce, adjust)
    return pyramid, feats


def gem_features(level8: np.ndarray, projection: nn.LayerParams) -> np.ndarray:
    """Linear 1x1 projection of the stride-8 level for the correlation filter."""
    return nn.conv2d(level8, projection)
