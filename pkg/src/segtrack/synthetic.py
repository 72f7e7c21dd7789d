"""Procedural segmentation sequences: a textured deforming target over a
textured background, with a look-alike distractor passing behind it.

Every frame is an analytic function of time, so any frame (or a training pair)
can be rendered without simulating the frames before it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import RotatedBox, min_area_rect

PAIR_RANGE = 50
FRAME_SIZE = (160, 160)  # (W, H)
MIN_MASK_PIXELS = 100


@dataclass
class BlobMotion:
    """Lissajous translation, constant spin, breathing scale and radial deformation."""

    center: tuple  # (x, y) at the middle of the Lissajous box
    amplitude: tuple  # (ax, ay)
    frequency: tuple  # (wx, wy) rad/frame
    phase: tuple
    radii: tuple  # base ellipse semi-axes (r1, r2)
    angle0: float
    spin: float  # rad/frame
    scale_amplitude: float
    scale_frequency: float
    harmonics: tuple  # ((k, amplitude, phase0, rate), ...)

    def position(self, t):
        return tuple(c + a * math.sin(w * t + p)
                     for c, a, w, p in zip(self.center, self.amplitude, self.frequency, self.phase))

    def angle(self, t):
        return self.angle0 + self.spin * t

    def scale(self, t):
        return 1.0 + self.scale_amplitude * math.sin(self.scale_frequency * t)

    def max_speed(self):
        return math.hypot(*(a * w for a, w in zip(self.amplitude, self.frequency)))


@dataclass
class Texture:
    base: np.ndarray  # RGB in [0, 1]
    accent: np.ndarray
    wavelength: float
    stripe_angle: float

    def shade(self, u, v):
        """Color at object coordinates (u, v): stripes mixed with a checker."""
        c, s = math.cos(self.stripe_angle), math.sin(self.stripe_angle)
        stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (c * u + s * v) / self.wavelength)
        checker = ((np.floor(u / self.wavelength) + np.floor(v / self.wavelength)) % 2) * 0.3
        w = np.clip(0.7 * stripes + checker, 0, 1)[..., None]
        return (1 - w) * self.base + w * self.accent


@dataclass
class SyntheticSequence:
    seed: int
    n_frames: int
    frame_size: tuple
    target: BlobMotion
    target_texture: Texture
    distractor: BlobMotion = None
    distractor_texture: Texture = None
    background: np.ndarray = field(default=None, repr=False)  # (H, W, 3) float
    noise: float = 0.02

    def shape_at(self, motion: BlobMotion, t):
        """Object-coordinate field and inside test for a blob at time t."""
        W, H = self.frame_size
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        cx, cy = motion.position(t)
        a = motion.angle(t)
        s = motion.scale(t)
        c, sn = math.cos(a), math.sin(a)
        u = (c * (xs - cx) + sn * (ys - cy)) / s
        v = (-sn * (xs - cx) + c * (ys - cy)) / s
        theta = np.arctan2(v, u)
        r1, r2 = motion.radii
        base = 1.0 / np.sqrt((np.cos(theta) / r1) ** 2 + (np.sin(theta) / r2) ** 2)
        wobble = 1.0
        for k, amp, ph, rate in motion.harmonics:
            wobble = wobble + amp * np.cos(k * theta + ph + rate * t)
        inside = np.hypot(u, v) <= base * wobble
        return inside, u, v

    def render(self, t):
        """Frame (H, W, 3) uint8 and target mask (H, W) bool at integer time t."""
        img = self.background.copy()
        if self.distractor is not None:
            inside, u, v = self.shape_at(self.distractor, t)
            img[inside] = self.distractor_texture.shade(u[inside], v[inside])
        inside, u, v = self.shape_at(self.target, t)
        img[inside] = self.target_texture.shade(u[inside], v[inside])
        rng = np.random.default_rng([self.seed, t])
        img = img + rng.normal(0, self.noise, img.shape)
        frame = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        return frame, inside

    def frames(self):
        for t in range(self.n_frames):
            yield self.render(t)


def mask_box(mask) -> RotatedBox:
    """Minimum-area rotated rectangle around the pixel squares of a mask."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask")
    corners = np.concatenate([np.stack([xs + dx, ys + dy], axis=1)
                              for dx in (-0.5, 0.5) for dy in (-0.5, 0.5)])
    return min_area_rect(corners)


def _random_texture(rng, base=None):
    base = rng.uniform(0.15, 0.9, 3) if base is None else base
    accent = np.clip(base + rng.choice([-1, 1], 3) * rng.uniform(0.25, 0.45, 3), 0, 1)
    return Texture(base, accent, rng.uniform(5, 10), rng.uniform(0, math.pi))


def _similar_texture(rng, tex: Texture):
    shift = rng.uniform(-0.12, 0.12, 3)
    return Texture(np.clip(tex.base + shift, 0, 1), np.clip(tex.accent + shift, 0, 1),
                   tex.wavelength * rng.uniform(0.8, 1.25), rng.uniform(0, math.pi))


def _random_background(rng, frame_size):
    W, H = frame_size
    coarse = ndimage.gaussian_filter(rng.normal(size=(H, W, 3)), sigma=(12, 12, 0))
    coarse = 0.5 + 0.25 * coarse / (coarse.std() + 1e-9)
    fine = ndimage.gaussian_filter(rng.normal(size=(H, W, 1)), sigma=(1.5, 1.5, 0))
    fine = 0.08 * fine / (fine.std() + 1e-9)
    return np.clip(coarse + fine, 0, 1)


def _random_motion(rng, frame_size, radius, speed, margin):
    W, H = frame_size
    r1 = radius * rng.uniform(1.0, 1.6)
    r2 = radius * rng.uniform(0.6, 1.0)
    reach = r1 * 1.6
    ax = max((W / 2 - reach - margin) * rng.uniform(0.5, 1.0), 0.0)
    ay = max((H / 2 - reach - margin) * rng.uniform(0.5, 1.0), 0.0)
    direction = rng.uniform(0, math.pi / 2)
    wx = speed * math.cos(direction) / max(ax, 1.0)
    wy = speed * math.sin(direction) / max(ay, 1.0)
    harmonics = tuple((k, rng.uniform(0.03, 0.1), rng.uniform(0, 2 * math.pi), rng.uniform(-0.08, 0.08))
                      for k in (2, 3, 4))
    return BlobMotion((W / 2, H / 2), (ax, ay), (wx, wy), tuple(rng.uniform(0, 2 * math.pi, 2)), (r1, r2),
                      rng.uniform(0, math.pi), rng.uniform(-0.04, 0.04), rng.uniform(0.0, 0.15),
                      rng.uniform(0.02, 0.06), harmonics)


def generate_sequence(seed, n_frames=100, frame_size=FRAME_SIZE, distractor=True, max_speed=3.0,
                      radius=(14.0, 20.0)) -> SyntheticSequence:
    """Deterministic random sequence for ``seed``.

    The target moves at most ``max_speed`` pixels per frame, spins up to
    about 2.3 degrees per frame and breathes in scale by up to 15%.
    """
    rng = np.random.default_rng([seed, 7919])
    target = _random_motion(rng, frame_size, rng.uniform(*radius), rng.uniform(0.4, 1.0) * max_speed, 4)
    tex = _random_texture(rng)
    seq = SyntheticSequence(seed, n_frames, tuple(frame_size), target, tex,
                            background=_random_background(rng, frame_size))
    if distractor:
        seq.distractor = _random_motion(rng, frame_size, rng.uniform(*radius) * 0.8,
                                        rng.uniform(0.4, 1.0) * max_speed, 0)
        seq.distractor_texture = _similar_texture(rng, tex)
    return seq


def generate_synthetic_sample(seed, pair_range=PAIR_RANGE, n_frames=100, frame_size=FRAME_SIZE):
    """A (train, test) pair from one sequence, frame indices at most ``pair_range`` apart.

    Returns ``((train_frame, train_mask), (test_frame, test_mask), (i, j))``.
    """
    seq = generate_sequence(seed, n_frames, frame_size)
    rng = np.random.default_rng([seed, 104729])
    i = int(rng.integers(n_frames))
    j = int(rng.integers(max(0, i - pair_range), min(n_frames - 1, i + pair_range) + 1))
    return seq.render(i), seq.render(j), (i, j)


def to_sequence(seq: SyntheticSequence, region="box", name=None):
    """Render a synthetic sequence as an evaluation sequence.

    Ground truth per frame is the mask or its minimum-area rotated box.
    Returns ``(Sequence, masks)``.
    """
    from .evaluation import Sequence

    frames, masks = zip(*seq.frames())
    gt = list(masks) if region == "mask" else [mask_box(m) for m in masks]
    return Sequence(name or f"synth{seq.seed:05d}", list(frames), gt), list(masks)
