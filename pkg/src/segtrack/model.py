"""Tracker configuration and the full parameter set of the network.

Layer names are stable and double as checkpoint keys:

    gim.reduce   1x1, base channels -> feature_dim   (trained)
    gim.adjust   3x3, feature_dim -> feature_dim     (trained)
    gem.project  1x1, base channels -> base channels (fixed)
    refine.*     refinement pathway                  (trained)
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .features import BASE_CHANNELS, MODEL_STRIDE
from .refine import RefineNet

ARCH_KEY = "meta.arch"
DROP_CHOICES = ("L", "F", "P")
BOX_METHODS = ("iou_mod", "ellipse", "min_max", "min_area")


@dataclass
class TrackerConfig:
    crop_size: int = 384
    feature_dim: int = 64
    refine_width: int = 64
    K: int = 3
    foreground_cap: int = 1000
    background_cap: int = 2000
    alpha: float = 0.25
    dcf_lambda: float = 1e-2
    dcf_rate: float = 0.1
    dcf_sigma_factor: float = 0.1
    size_smoothing: float = 0.4
    context: float = 4.0
    box_method: str = "iou_mod"
    shrink_only: bool = False
    drop: tuple = ()
    self_update: bool = False
    seed: int = 0

    def __post_init__(self):
        self.drop = tuple(sorted(set(self.drop)))
        if self.crop_size % MODEL_STRIDE:
            raise ValueError("crop_size must be a multiple of 8")
        if not set(self.drop) <= set(DROP_CHOICES):
            raise ValueError(f"drop must be a subset of {DROP_CHOICES}")
        if self.box_method not in BOX_METHODS:
            raise ValueError(f"box_method must be one of {BOX_METHODS}")
        for name in ("crop_size", "feature_dim", "refine_width", "K", "context"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.size_smoothing <= 1:
            raise ValueError("size_smoothing must lie in (0, 1]")

    @property
    def grid_size(self) -> int:
        return self.crop_size // MODEL_STRIDE

    def replace(self, **changes) -> "TrackerConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "paper": TrackerConfig(),
    "desk": TrackerConfig(crop_size=128, feature_dim=32, refine_width=16),
}

# named ablation variants -> config overrides
ABLATIONS = {
    "full": {},
    "no_L": {"drop": ("L",)},
    "no_F": {"drop": ("F",)},
    "no_P": {"drop": ("P",)},
    "no_FP": {"drop": ("F", "P")},
    "self_update": {"self_update": True},
    "min_max": {"box_method": "min_max"},
    "min_area": {"box_method": "min_area"},
}


def preset(name: str) -> TrackerConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].replace()


def ablation_config(config: TrackerConfig, name: str) -> TrackerConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return config.replace(**ABLATIONS[name])


def _gem_projection(dtype):
    """Per-channel rescaling that gives color, gradient and orientation channels comparable weight."""
    scale = np.array([1, 1, 1, 4, 4] + [2] * (BASE_CHANNELS - 5), dtype)
    w = np.diag(scale)[:, :, None, None]
    return nn.LayerParams(w, np.zeros(BASE_CHANNELS, dtype), trainable=False)


@dataclass
class SegmentationNetwork:
    """All parameters of the tracker, keyed by stable layer names."""

    config: TrackerConfig
    params: dict = field(default_factory=dict)
    refine: RefineNet = None

    @classmethod
    def create(cls, config: TrackerConfig, seed=0, dtype=np.float32) -> "SegmentationNetwork":
        rng = np.random.default_rng(seed)
        d = config.feature_dim
        params = {
            "gim.reduce": nn.LayerParams.kaiming(BASE_CHANNELS, d, 1, rng, dtype),
            "gim.adjust": nn.LayerParams.kaiming(d, d, 3, rng, dtype),
            "gem.project": _gem_projection(dtype),
        }
        refine = RefineNet(config.refine_width, BASE_CHANNELS, 3, rng, dtype)
        for name, p in refine.params.items():
            params[f"refine.{name}"] = p  # shared objects
        return cls(config, params, refine)

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def arch(self) -> np.ndarray:
        c = self.config
        return np.array([c.crop_size, c.feature_dim, c.refine_width, BASE_CHANNELS], np.float32)

    def save(self, path) -> None:
        tensors = {ARCH_KEY: self.arch()}
        for name, p in self.params.items():
            tensors[f"{name}.weight"] = p.weights
            tensors[f"{name}.bias"] = p.bias
        nn.save_tensors(path, tensors)

    @classmethod
    def load(cls, path, config: TrackerConfig = None) -> "SegmentationNetwork":
        """Load weights; the architecture comes from the file, other settings from ``config``."""
        tensors = nn.load_tensors(path)
        if ARCH_KEY not in tensors:
            raise nn.CheckpointError(f"{path}: missing architecture record")
        crop, dim, width, base = (int(v) for v in tensors[ARCH_KEY])
        if base != BASE_CHANNELS:
            raise nn.CheckpointError(f"{path}: trained for {base} base channels, backbone has {BASE_CHANNELS}")
        config = (config or TrackerConfig()).replace(feature_dim=dim, refine_width=width)
        if config.crop_size != crop:
            config = config.replace(crop_size=crop)
        net = cls.create(config)
        nn.load_checkpoint(path, net.params)
        return net
