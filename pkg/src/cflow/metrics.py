"""Evaluation metrics: bits per dimension and windowed SSIM."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN2 = math.log(2.0)
DEQUANT_OFFSET_BITS = 8.0


def bpd(nll_nats: float, dims: int, discrete: bool = False) -> float:
    """Negative log-likelihood in nats -> bits per dimension.

    With ``discrete=True`` the score refers to 8-bit data that was
    dequantized by uniform noise of width 1/256, which adds
    ``log2(256) = 8`` bits per dimension.
    """
    if dims <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    value = nll_nats / (dims * LN2)
    return value + DEQUANT_OFFSET_BITS if discrete else value


def nll_from_bpd(bits: float, dims: int, discrete: bool = False) -> float:
    """Inverse of :func:`bpd`."""
    if dims <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    if discrete:
        bits = bits - DEQUANT_OFFSET_BITS
    return bits * dims * LN2


def ssim(a, b, data_range: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` uniform windows (stride 1).

    Inputs are ``[H, W]`` or ``[H, W, C]``; multi-channel images are scored
    per channel and averaged. Windows shrink to the image size for images
    smaller than ``window``. Variances and covariance use the population
    (``1/n``) normalisation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"ssim expects [H, W] or [H, W, C], got shape {a.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wh, ww = min(window, a.shape[0]), min(window, a.shape[1])
    scores = []
    for ch in range(a.shape[2]):
        pa = sliding_window_view(a[..., ch], (wh, ww))
        pb = sliding_window_view(b[..., ch], (wh, ww))
        mu_a = pa.mean(axis=(-2, -1))
        mu_b = pb.mean(axis=(-2, -1))
        var_a = pa.var(axis=(-2, -1))
        var_b = pb.var(axis=(-2, -1))
        cov = ((pa - mu_a[..., None, None]) * (pb - mu_b[..., None, None])).mean(axis=(-2, -1))
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        scores.append(float((num / den).mean()))
    return float(np.mean(scores))


def pearson(x, y) -> float:
    """Pearson correlation of two flattened arrays (0 when either is constant)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((xc * xc).sum() * (yc * yc).sum()))
    return float((xc * yc).sum() / denom) if denom > 0 else 0.0
