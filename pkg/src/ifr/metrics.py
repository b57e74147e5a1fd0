"""Greyscale image quality and word accuracy."""

import math
import re

import numpy as np
from scipy import ndimage

from .data_synth import gaussian_kernel

PSNR_CAP = 100.0
K1, K2 = 0.01, 0.03
WINDOW_SIZE, WINDOW_SIGMA = 11, 1.5

_NON_ALNUM = re.compile(r"[^0-9a-z]")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def quantize(img):
    """Round to the 8-bit grid an image would be stored on."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for peak 1.0; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped(value, cap=PSNR_CAP):
    return min(value, cap)


def ssim_map(a, b, data_range=1.0):
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise ValueError("ssim needs at least two dimensions")
    win = gaussian_kernel(WINDOW_SIZE, WINDOW_SIGMA)
    win = win.reshape((1,) * (a.ndim - 2) + win.shape)

    def filt(x):
        return ndimage.correlate(x, win, mode="mirror")

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Mean structural similarity over the trailing (H, W) axes."""
    return float(np.mean(ssim_map(a, b, data_range)))


def normalize_text(text):
    return _NON_ALNUM.sub("", str(text).lower())


def word_accuracy(preds, gts):
    """Case-insensitive exact-match rate over alphanumeric characters."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} labels")
    if not preds:
        raise ValueError("word_accuracy needs at least one sample")
    hits = sum(normalize_text(p) == normalize_text(g) for p, g in zip(preds, gts))
    return hits / len(preds)
