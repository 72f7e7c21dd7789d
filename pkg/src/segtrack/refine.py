"""Refinement pathway: fuse L, F, P and upscale x8 to a two-class map.

    concat(L, F, P) -> conv3x3 + ReLU                     (G)
    UP1: x2 -> (conv3x3 + ReLU) x2 + ReLU(conv3x3(s4))    (2G)
    UP2: x2 -> (conv3x3 + ReLU) x2 + ReLU(conv3x3(s2))    (4G)
    UP*: x2 -> conv3x3 (to 2 channels) -> softmax         (8G)
"""
from __future__ import annotations

import numpy as np

from . import nn

STAGES = ("up1", "up2")


class RefineNet:
    """Parameter container for the refinement pathway (stable layer names)."""

    def __init__(self, width=64, skip_channels=13, in_channels=3, rng=None, dtype=np.float32,
                 upsample_mode="bilinear"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.upsample_mode = upsample_mode
        self.params = {"fusion": nn.LayerParams.kaiming(in_channels, width, 3, rng, dtype)}
        for stage in STAGES:
            self.params[f"{stage}.conv1"] = nn.LayerParams.kaiming(width, width, 3, rng, dtype)
            self.params[f"{stage}.conv2"] = nn.LayerParams.kaiming(width, width, 3, rng, dtype)
            self.params[f"{stage}.skip"] = nn.LayerParams.kaiming(skip_channels, width, 3, rng, dtype)
        self.params["final"] = nn.LayerParams.kaiming(width, 2, 3, rng, dtype)

    def stage_params(self, stage):
        p = self.params
        return p[f"{stage}.conv1"], p[f"{stage}.conv2"], p[f"{stage}.skip"]


def upscale_stage(x, skip, params, mode="bilinear"):
    """Double resolution, two conv+ReLU, add the adjusted skip features.

    ``params`` is ``(conv1, conv2, skip_adjust)``; with ``skip=None`` the
    adjustment branch is left out.  Returns ``(output, cache)``.
    """
    conv1, conv2, adjust = params
    up = nn.upsample2x(x, mode)
    a1 = nn.conv2d(up, conv1)
    r1 = nn.relu(a1)
    a2 = nn.conv2d(r1, conv2)
    out = nn.relu(a2)
    a3 = None
    if skip is not None:
        if skip.shape[-2:] != out.shape[-2:]:
            raise ValueError(f"skip features {skip.shape[-2:]} do not match stage resolution {out.shape[-2:]}")
        a3 = nn.conv2d(skip, adjust)
        out = out + nn.relu(a3)
    return out, (up, a1, r1, a2, skip, a3)


def upscale_stage_backward(grad, cache, params, mode="bilinear"):
    conv1, conv2, adjust = params
    up, a1, r1, a2, skip, a3 = cache
    if skip is not None:
        nn.conv2d_backward(nn.relu_backward(grad, a3), skip, adjust)
    g = nn.conv2d_backward(nn.relu_backward(grad, a2), r1, conv2)
    g = nn.conv2d_backward(nn.relu_backward(g, a1), up, conv1)
    return nn.upsample2x_backward(g, mode)


def final_stage(x, final, mode="bilinear"):
    """The modified last stage: doubling and a single convolution to logits."""
    up = nn.upsample2x(x, mode)
    return nn.conv2d(up, final), up


def refine_forward(fusion_input, skips, net: RefineNet):
    """Logits (2, 8G, 8G) from the (3, G, G) channel stack.

    ``skips`` are the backbone levels at strides 4 and 2 (resolutions 2G, 4G);
    batched (N, ...) inputs are accepted throughout.  Returns
    ``(logits, cache)``; apply :func:`segtrack.nn.softmax_channels` for the
    probability map.
    """
    p = net.params
    mode = net.upsample_mode
    a0 = nn.conv2d(fusion_input, p["fusion"])
    x = nn.relu(a0)
    caches = []
    for stage, skip in zip(STAGES, skips):
        x, c = upscale_stage(x, skip, net.stage_params(stage), mode)
        caches.append(c)
    logits, up = final_stage(x, p["final"], mode)
    return logits, (fusion_input, a0, caches, up)


def refine_backward(grad_logits, cache, net: RefineNet):
    """Accumulate parameter gradients; return the gradient w.r.t. the channel stack."""
    p = net.params
    mode = net.upsample_mode
    fusion_input, a0, caches, up = cache
    g = nn.upsample2x_backward(nn.conv2d_backward(grad_logits, up, p["final"]), mode)
    for stage, c in zip(reversed(STAGES), reversed(caches)):
        g = upscale_stage_backward(g, c, net.stage_params(stage), mode)
    return nn.conv2d_backward(nn.relu_backward(g, a0), fusion_input, p["fusion"])


def refine_probabilities(fusion_input, skips, net: RefineNet) -> np.ndarray:
    logits, _ = refine_forward(fusion_input, skips, net)
    return nn.softmax_channels(logits)
