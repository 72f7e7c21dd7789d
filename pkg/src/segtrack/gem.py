"""Geometrically constrained model: a multi-channel correlation filter.

The filter is learned in closed form per frequency (ridge regression against a
Gaussian label) and applied by circular correlation.  Grid coordinates in this
module are ``(row, col)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn

LAMBDA = 1e-2
UPDATE_RATE = 0.1
SIGMA_FACTOR = 0.1  # label width relative to the target extent on the grid


@dataclass
class CorrelationFilter:
    numerator: np.ndarray  # (C, H, W) complex: label spectrum times conj(feature spectrum)
    denominator: np.ndarray  # (H, W) real: summed feature power + lambda
    label: np.ndarray  # (H, W) Gaussian used at training time
    sigma: float
    lam: float = LAMBDA
    eta: float = UPDATE_RATE
    window: np.ndarray = None  # (H, W) cosine window or None

    @property
    def shape(self):
        return self.denominator.shape

    def filter(self) -> np.ndarray:
        """Per-frequency filter (conjugated), numerator / denominator."""
        return self.numerator / self.denominator


def cosine_window(shape) -> np.ndarray:
    return np.outer(np.hanning(shape[0] + 2)[1:-1], np.hanning(shape[1] + 2)[1:-1])


def gaussian_label(shape, center, sigma) -> np.ndarray:
    """Periodic Gaussian peaking at ``center`` (row, col); equals 1 there on integer centers."""
    h, w = shape
    dr = np.abs(np.arange(h) - center[0]) % h
    dr = np.minimum(dr, h - dr)
    dc = np.abs(np.arange(w) - center[1]) % w
    dc = np.minimum(dc, w - dc)
    return np.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2.0 * sigma**2))


def _spectrum(features, window):
    f = features if window is None else features * window
    return np.fft.fft2(f, axes=(-2, -1))


def _statistics(features, center, sigma, lam, window):
    X = _spectrum(features, window)
    label = gaussian_label(features.shape[-2:], center, sigma)
    G = np.fft.fft2(label)
    num = G[None] * np.conj(X)
    den = (X.real**2 + X.imag**2).sum(axis=0) + lam
    return num, den, label


def train_dcf(features, target_center, lam=LAMBDA, sigma=None, target_extent=None, eta=UPDATE_RATE,
              use_window=True) -> CorrelationFilter:
    """Closed-form ridge-regression filter for ``features`` (C, H, W).

    ``sigma`` defaults to ``SIGMA_FACTOR`` times ``target_extent`` (grid cells),
    and the extent defaults to a quarter of the grid, i.e. a target filling
    the middle of a four-times-larger search region.
    """
    if lam <= 0:
        raise ValueError("regularization lambda must be positive")
    shape = features.shape[-2:]
    if sigma is None:
        extent = target_extent if target_extent is not None else np.sqrt(shape[0] * shape[1]) / 4.0
        sigma = SIGMA_FACTOR * extent
    window = cosine_window(shape) if use_window else None
    num, den, label = _statistics(features, target_center, sigma, lam, window)
    return CorrelationFilter(num, den, label, float(sigma), lam, eta, window)


def correlation_response(filt: CorrelationFilter, features) -> np.ndarray:
    """Raw (pre-nonlinearity) correlation response summed over channels."""
    if features.shape[0] != filt.numerator.shape[0]:
        raise ValueError("feature channels do not match the filter")
    Z = _spectrum(features, filt.window)
    return np.real(np.fft.ifft2((filt.numerator * Z).sum(axis=0) / filt.denominator))


def argmax_2d(response):
    """Row-major argmax: ties go to the smallest row, then column."""
    r, c = np.unravel_index(int(np.argmax(response)), response.shape)
    return int(r), int(c)


def apply_dcf(filt: CorrelationFilter, features, pelu_a=1.0, pelu_b=1.0):
    """PeLU of the correlation response plus its argmax (row, col)."""
    response = nn.pelu(correlation_response(filt, features), pelu_a, pelu_b)
    return response, argmax_2d(response)


def update_dcf(filt: CorrelationFilter, features, new_center, eta=None) -> CorrelationFilter:
    """Exponential moving average of filter statistics toward the current frame."""
    eta = filt.eta if eta is None else eta
    if not 0.0 <= eta <= 1.0:
        raise ValueError("update rate must lie in [0, 1]")
    if eta == 0.0:
        return replace(filt, numerator=filt.numerator.copy(), denominator=filt.denominator.copy())
    num, den, label = _statistics(features, new_center, filt.sigma, filt.lam, filt.window)
    if eta == 1.0:
        return replace(filt, numerator=num, denominator=den, label=label)
    return replace(filt,
                   numerator=(1 - eta) * filt.numerator + eta * num,
                   denominator=(1 - eta) * filt.denominator + eta * den,
                   label=label)


def location_channel(center, shape) -> np.ndarray:
    """L = 1 - d / d_diag: Euclidean distance to ``center`` (row, col), normalized by the grid diagonal."""
    h, w = shape
    rows, cols = np.indices(shape, dtype=np.float64)
    d = np.hypot(rows - center[0], cols - center[1])
    return 1.0 - d / np.hypot(h - 1, w - 1)
