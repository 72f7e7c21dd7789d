"""Geometrically invariant model: foreground/background feature sets.

Each model-grid cell of the search region is matched against every stored
foreground and background vector by cosine similarity; the F and B channels
average the K best matches, and P is the two-way softmax of F and B.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import MODEL_STRIDE

DEFAULT_K = 3
FOREGROUND_CAP = 1000
BACKGROUND_CAP = 2000


class GimError(ValueError):
    """Raised when a mask leaves one of the two vector sets empty."""


@dataclass
class GimModel:
    foreground: np.ndarray  # (N_F, D)
    background: np.ndarray  # (N_B, D)
    K: int = DEFAULT_K
    # flat grid indices the vectors were taken from (for backprop in training)
    foreground_cells: np.ndarray = field(default=None, repr=False)
    background_cells: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if len(self.foreground) == 0 or len(self.background) == 0:
            raise GimError("both vector sets must be non-empty")
        if self.foreground.shape[1] != self.background.shape[1]:
            raise ValueError("foreground and background vectors differ in dimension")


@dataclass
class ChannelStack:
    """Model-resolution channels: location, foreground, background, posterior."""

    L: np.ndarray
    F: np.ndarray
    B: np.ndarray
    P: np.ndarray

    def fusion_input(self, drop=()) -> np.ndarray:
        """(3, G, G) refinement input ordered L, F, P; dropped channels are zeroed."""
        chans = {"L": self.L, "F": self.F, "P": self.P}
        return np.stack([np.zeros_like(v) if k in drop else v for k, v in chans.items()])


def downsample_mask(mask, stride=MODEL_STRIDE) -> np.ndarray:
    """Majority vote of each stride x stride block."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    return m.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3)) > 0.5


def build_gim_model(features, target_mask, K=DEFAULT_K, caps=(FOREGROUND_CAP, BACKGROUND_CAP),
                    rng=None) -> GimModel:
    """Collect foreground vectors inside the mask and background vectors outside it.

    ``target_mask`` is either at model resolution or at crop resolution (then
    majority-downsampled).  Sets larger than ``caps`` are uniformly subsampled.
    """
    d, gh, gw = features.shape
    mask = np.asarray(target_mask, bool)
    if mask.shape != (gh, gw):
        mask = downsample_mask(mask, mask.shape[0] // gh)
    flat = features.reshape(d, -1).T
    fg = np.flatnonzero(mask.ravel())
    bg = np.flatnonzero(~mask.ravel())
    if fg.size == 0:
        raise GimError("target mask has no foreground cells at model resolution")
    if bg.size == 0:
        raise GimError("target mask leaves no background cells")
    rng = rng if rng is not None else np.random.default_rng(0)
    if fg.size > caps[0]:
        fg = np.sort(rng.choice(fg, caps[0], replace=False))
    if bg.size > caps[1]:
        bg = np.sort(rng.choice(bg, caps[1], replace=False))
    return GimModel(flat[fg].copy(), flat[bg].copy(), K, fg, bg)


def _normalize(v):
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return v / safe, norm


def _normalize_backward(grad, unit, norm):
    # zero vectors normalize to zero and pass no gradient
    safe = np.where(norm > 0, norm, np.inf)
    return (grad - unit * (unit * grad).sum(axis=1, keepdims=True)) / safe


def _top_k_mean(sim, K):
    n = sim.shape[1]
    if K >= n:
        return sim.mean(axis=1), np.broadcast_to(np.arange(n), sim.shape), n
    idx = np.argpartition(-sim, K - 1, axis=1)[:, :K]
    return np.take_along_axis(sim, idx, axis=1).mean(axis=1), idx, K


def similarity_channels(features, model: GimModel, return_cache=False):
    """F and B maps: mean of the top-K cosine similarities to each vector set."""
    d, gh, gw = features.shape
    y, ynorm = _normalize(features.reshape(d, -1).T)
    out, cache = [], [y, ynorm, (gh, gw)]
    for vectors in (model.foreground, model.background):
        x, xnorm = _normalize(vectors)
        sim = y @ x.T
        vals, idx, k = _top_k_mean(sim, model.K)
        out.append(vals.reshape(gh, gw))
        cache.append((x, xnorm, idx, k))
    if return_cache:
        return out[0], out[1], cache
    return out[0], out[1]


def similarity_backward(grad_F, grad_B, cache):
    """Gradients w.r.t. the search features (D, G, G) and both vector sets."""
    y, ynorm, (gh, gw) = cache[:3]
    n = y.shape[0]
    gy = np.zeros_like(y)
    gsets = []
    for g, (x, xnorm, idx, k) in zip((grad_F, grad_B), cache[3:]):
        gsim = np.zeros((n, x.shape[0]), dtype=y.dtype)
        np.put_along_axis(gsim, np.asarray(idx), (g.reshape(-1, 1) / k).astype(y.dtype), axis=1)
        gy += gsim @ x
        gsets.append(_normalize_backward(gsim.T @ y, x, xnorm))
    gfeat = _normalize_backward(gy, y, ynorm)
    return gfeat.T.reshape(-1, gh, gw), gsets[0], gsets[1]


def posterior_channel(F, B):
    """P = exp(F) / (exp(F) + exp(B))."""
    return 1.0 / (1.0 + np.exp(np.asarray(B) - np.asarray(F)))


def posterior_backward(grad_P, P):
    g = grad_P * P * (1 - P)
    return g, -g
