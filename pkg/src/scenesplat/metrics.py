"""Image quality metrics (SSIM, PSNR) and the refinement loss with its gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .core import ImageFrame, InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_WINDOW = _gaussian_window()


def _pixels(image) -> np.ndarray:
    if isinstance(image, ImageFrame):
        return image.pixels
    return np.asarray(image, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidParameterError("images must have shape (H, W, 3)")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidParameterError(f"images must be at least {SSIM_WINDOW} pixels per side")


def _ssim_channel(a: np.ndarray, b: np.ndarray, with_grad: bool):
    """SSIM map statistics for one channel; optionally d(mean SSIM)/d(a)."""
    w = _WINDOW
    mu_a = correlate2d(a, w, mode="valid")
    mu_b = correlate2d(b, w, mode="valid")
    e_aa = correlate2d(a * a, w, mode="valid")
    e_bb = correlate2d(b * b, w, mode="valid")
    e_ab = correlate2d(a * b, w, mode="valid")
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b

    top1 = 2.0 * mu_a * mu_b + SSIM_C1
    top2 = 2.0 * cov + SSIM_C2
    bot1 = mu_a**2 + mu_b**2 + SSIM_C1
    bot2 = var_a + var_b + SSIM_C2
    smap = (top1 * top2) / (bot1 * bot2)
    if not with_grad:
        return float(smap.mean()), None

    # Window-level partials of S = (top1 top2)/(bot1 bot2) w.r.t. the raw
    # window statistics, then adjoint-correlate back to pixel space.
    scale = 1.0 / smap.size
    d_mu_a = (2.0 * mu_b * top2 / (bot1 * bot2)
              - 2.0 * mu_b * top1 / (bot1 * bot2)
              - smap * (2.0 * mu_a / bot1)
              + smap * (2.0 * mu_a / bot2))
    d_eaa = -smap / bot2
    d_eab = 2.0 * top1 / (bot1 * bot2)

    grad = (convolve2d(d_mu_a * scale, w, mode="full")
            + convolve2d(d_eaa * scale, w, mode="full") * 2.0 * a
            + convolve2d(d_eab * scale, w, mode="full") * b)
    return float(smap.mean()), grad


def ssim(a, b) -> float:
    """Mean structural similarity over RGB channels (11x11 Gaussian windows)."""
    pa, pb = _pixels(a), _pixels(b)
    _check_pair(pa, pb)
    return float(np.mean([_ssim_channel(pa[..., c], pb[..., c], False)[0] for c in range(3)]))


def ssim_with_gradient(a, b) -> tuple[float, np.ndarray]:
    """(mean SSIM, d(mean SSIM)/d(a)) with gradient shaped like the image."""
    pa, pb = _pixels(a), _pixels(b)
    _check_pair(pa, pb)
    values = []
    grad = np.zeros_like(pa)
    for c in range(3):
        value, g = _ssim_channel(pa[..., c], pb[..., c], True)
        values.append(value)
        grad[..., c] = g
    return float(np.mean(values)), grad / 3.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images; inf when identical."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InvalidParameterError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class LossBreakdown:
    loss: float
    gradient: np.ndarray
    l1: float
    ssim_term: float  # 1 - ssim


def gs_loss_detailed(rendered, target, gamma: float) -> LossBreakdown:
    pr, pt = _pixels(rendered), _pixels(target)
    _check_pair(pr, pt)
    diff = pr - pt
    l1 = float(np.mean(np.abs(diff)))
    grad_l1 = np.sign(diff) / diff.size
    ssim_value, ssim_grad = ssim_with_gradient(pr, pt)
    loss = (1.0 - gamma) * l1 + gamma * (1.0 - ssim_value)
    grad = (1.0 - gamma) * grad_l1 - gamma * ssim_grad
    return LossBreakdown(loss, grad, l1, 1.0 - ssim_value)


def gs_loss(rendered, target, gamma: float) -> tuple[float, np.ndarray]:
    """Blend of L1 and (1 - SSIM) plus its analytic per-pixel gradient."""
    detail = gs_loss_detailed(rendered, target, gamma)
    return detail.loss, detail.gradient
