"""Synthetic text rendering and paired high/low quality sample generation.

Images here are float64 numpy arrays with intensities in [0, 1]; the last
two axes are (height, width). Every random decision is drawn from a local
``numpy.random.Generator`` seeded per sample, so generation is a pure
function of its arguments.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .charset import DEFAULT_SYMBOLS
from .font import GLYPH_HEIGHT, GLYPH_WIDTH, glyph

HEIGHT = 32
WIDTH = 128
MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    """Malformed manifest line or missing image referenced by a manifest."""


def standard_sigma(size):
    """Gaussian sigma conventionally paired with an odd kernel size."""
    return 0.3 * ((size - 1) * 0.5 - 1) + 0.8


@dataclass(frozen=True)
class DegradeConfig:
    kernel_sizes: tuple = (9, 11, 13, 15, 17)
    ratio_range: tuple = (1.0, 3.0)
    # (clean, blur, down-up, blur then down-up)
    mix_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    # fixed sigma for every kernel size; None selects standard_sigma
    sigma: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "ratio_range", tuple(float(r) for r in self.ratio_range))
        object.__setattr__(self, "mix_probs", tuple(float(p) for p in self.mix_probs))
        if not self.kernel_sizes:
            raise ValueError("kernel_sizes must not be empty")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel size must be odd and positive, got {k}")
        lo, hi = self.ratio_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"ratio_range must satisfy 1 <= lo <= hi, got {self.ratio_range}")
        if len(self.mix_probs) != 4 or any(p < 0 for p in self.mix_probs):
            raise ValueError(f"mix_probs must be four nonnegative numbers, got {self.mix_probs}")
        if abs(sum(self.mix_probs) - 1.0) > 1e-9:
            raise ValueError(f"mix_probs must sum to 1, got {sum(self.mix_probs)}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def sigma_for(self, size):
        return standard_sigma(size) if self.sigma is None else float(self.sigma)


@dataclass
class PairedSample:
    hq: np.ndarray
    dq: np.ndarray
    label: str
    seed: int
    id: str = ""


@dataclass(frozen=True)
class RenderStyle:
    """Rendering knobs. ``randomize=False`` gives a fixed, centred, noiseless layout.

    The glyph string is drawn into a box covering a random fraction of the
    canvas, the way cropped word images look once resized to the network input.
    """

    randomize: bool = True
    height: int = HEIGHT
    width: int = WIDTH
    height_frac: tuple = (0.6, 0.9)
    width_frac: tuple = (0.6, 0.95)
    # widest allowed glyph cell relative to box height, so short words are not smeared flat
    max_cell_aspect: float = 1.5
    min_contrast: float = 0.3
    intensity_range: tuple = (0.05, 0.95)
    noise_sigma: float = 0.02
    fixed_scale: int = 3
    fixed_fg: float = 0.85
    fixed_bg: float = 0.15


def gaussian_kernel(size, sigma):
    """Normalized isotropic Gaussian sampled at integer offsets from the centre."""
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size!r}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def blur(img, kernel):
    """Convolve the trailing (H, W) axes with ``kernel`` using mirror padding."""
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape == (1, 1):
        return np.clip(img * kernel[0, 0], 0.0, 1.0)
    # the kernels are symmetric, so correlation equals convolution
    full = kernel.reshape((1,) * (img.ndim - 2) + kernel.shape)
    out = ndimage.correlate(img, full, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def bilinear_matrix(n_in, n_out):
    """(n_out, n_in) interpolation matrix using half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def resize(img, height, width):
    """Bilinear resize of the trailing (H, W) axes."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (height, width):
        return img.copy()
    rows = bilinear_matrix(h, height)
    cols = bilinear_matrix(w, width)
    return rows @ img @ cols.T


def downup(img, ratio):
    """Shrink by ``ratio`` and resize back to the original size."""
    if not ratio >= 1.0:
        raise ValueError(f"down-up ratio must be >= 1, got {ratio!r}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    small = resize(img, max(1, _round_half_up(h / ratio)), max(1, _round_half_up(w / ratio)))
    return np.clip(resize(small, h, w), 0.0, 1.0)


@dataclass(frozen=True)
class Degradation:
    branch: int
    kernel_size: Optional[int] = None
    ratio: Optional[float] = None


def draw_degradation(seed, cfg):
    """Replay the random choices ``degrade`` makes for ``seed``."""
    rng = np.random.default_rng(seed)
    branch = int(rng.choice(4, p=cfg.mix_probs))
    k = r = None
    if branch in (1, 3):
        k = int(rng.choice(cfg.kernel_sizes))
    if branch in (2, 3):
        r = float(rng.uniform(*cfg.ratio_range))
    return Degradation(branch, k, r)


def apply_degradation(hq, d, cfg):
    out = np.array(hq, dtype=np.float64, copy=True)
    if d.kernel_size is not None:
        out = blur(out, gaussian_kernel(d.kernel_size, cfg.sigma_for(d.kernel_size)))
    if d.ratio is not None:
        out = downup(out, d.ratio)
    return out


def degrade(hq, seed, cfg=DegradeConfig()):
    """Seeded random mix of identity, blur, down-up, and blur followed by down-up."""
    return apply_degradation(hq, draw_degradation(seed, cfg), cfg)


def augment(img, rng, max_shift=12, max_vshift=2, invert_prob=0.5):
    """Random translation with edge fill, then optional polarity inversion.

    Applied to a clean image before degradation so the training pair stays aligned.
    """
    h, w = img.shape
    dy = int(rng.integers(-max_vshift, max_vshift + 1))
    dx = int(rng.integers(-max_shift, max_shift + 1))
    padded = np.pad(img, ((max_vshift, max_vshift), (max_shift, max_shift)), mode="edge")
    y0, x0 = max_vshift - dy, max_shift - dx
    out = padded[y0:y0 + h, x0:x0 + w].copy()
    if rng.random() < invert_prob:
        out = 1.0 - out
    return out


def _strip(glyphs):
    """The label as one bitmap at native font size, one blank column between glyphs."""
    cell = GLYPH_WIDTH + 1
    strip = np.zeros((GLYPH_HEIGHT, cell * len(glyphs) - 1), dtype=bool)
    for i, g in enumerate(glyphs):
        strip[:, i * cell:i * cell + GLYPH_WIDTH] = g
    return strip


def _nearest(mask, height, width):
    rows = (np.arange(height) * mask.shape[0]) // height
    cols = (np.arange(width) * mask.shape[1]) // width
    return mask[rows[:, None], cols[None, :]]


def _box(n, strip_w, rng, style):
    H, W = style.height, style.width
    if not style.randomize:
        sy = max(1, min(style.fixed_scale, H // GLYPH_HEIGHT))
        sx = max(1, min(style.fixed_scale, (W - 2) // strip_w))
        th, tw = sy * GLYPH_HEIGHT, sx * strip_w
        return th, tw, (H - th) // 2, (W - tw) // 2
    lo, hi = (int(round(f * H)) for f in style.height_frac)
    th = max(GLYPH_HEIGHT, int(rng.integers(lo, hi + 1)))
    w_hi = min(int(round(style.width_frac[1] * W)), int(style.max_cell_aspect * th * n))
    w_hi = max(strip_w, min(w_hi, W - 2))
    w_lo = max(strip_w, int(round(w_hi * style.width_frac[0] / style.width_frac[1])))
    tw = int(rng.integers(w_lo, w_hi + 1))
    y0 = int(rng.integers(0, H - th + 1))
    x0 = int(rng.integers(1, W - tw))
    return th, tw, y0, x0


def render_text(label, seed=0, style=RenderStyle()):
    """Rasterize ``label`` with the embedded font onto a greyscale canvas."""
    if not label:
        raise ValueError("label must not be empty")
    glyphs = [glyph(c) for c in label]
    strip = _strip(glyphs)
    H, W = style.height, style.width
    if strip.shape[1] > W - 2:
        raise ValueError(f"label of length {len(glyphs)} does not fit a {W}-pixel canvas")
    rng = np.random.default_rng(seed)
    th, tw, y0, x0 = _box(len(glyphs), strip.shape[1], rng, style)
    if style.randomize:
        fg, bg = _draw_intensities(rng, style)
    else:
        fg, bg = style.fixed_fg, style.fixed_bg

    mask = np.zeros((H, W), dtype=bool)
    mask[y0:y0 + th, x0:x0 + tw] = _nearest(strip, th, tw)
    img = np.where(mask, fg, bg).astype(np.float64)
    if style.randomize and style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_intensities(rng, style):
    lo, hi = style.intensity_range
    c = style.min_contrast
    bg = float(rng.uniform(lo, hi))
    sides = []
    if bg + c <= hi:
        sides.append((bg + c, hi))
    if bg - c >= lo:
        sides.append((lo, bg - c))
    a, b = sides[int(rng.integers(len(sides)))]
    return float(rng.uniform(a, b)), bg


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img):
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def build_dataset(n, charset=DEFAULT_SYMBOLS, max_len=4, seed=0, out_dir=".", max_t=16,
                  style=RenderStyle()):
    """Write ``n`` rendered HQ PNGs plus a JSON-lines manifest; return its path."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 1 <= max_len <= max_t - 1:
        raise ValueError(f"max_len must be in [1, {max_t - 1}], got {max_len}")
    charset = str(charset).lower()
    if not charset:
        raise ValueError("charset must not be empty")
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    rng = np.random.default_rng(seed)
    symbols = list(charset)
    width = max(6, len(str(n - 1)))
    lines = []
    for i in range(n):
        length = int(rng.integers(1, max_len + 1))
        label = "".join(rng.choice(symbols, size=length))
        render_seed = int(rng.integers(0, 2**63 - 1))
        deg_seed = int(rng.integers(0, 2**63 - 1))
        sid = f"{i:0{width}d}"
        rel = f"images/{sid}.png"
        save_png(out / rel, render_text(label, render_seed, style))
        lines.append(json.dumps({"id": sid, "label": label, "hq": rel, "seed": deg_seed}))
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(manifest):
    """Parse a manifest into a list of records, validating each line."""
    manifest = Path(manifest)
    base = manifest.parent
    records = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid, label, hq, seed = rec["id"], rec["label"], rec["hq"], rec["seed"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{manifest}:{lineno}: malformed record ({exc})") from None
            if not isinstance(label, str) or not label or not isinstance(seed, int):
                raise ManifestError(f"{manifest}:{lineno}: bad label or seed")
            path = base / hq
            if not path.is_file():
                raise ManifestError(f"{manifest}:{lineno}: missing image {path}")
            records.append({"id": str(rid), "label": label, "hq": path, "seed": seed,
                            "line": lineno})
    return records


def load_pairs(manifest, cfg=DegradeConfig(), shuffle_seed=None) -> Iterator[PairedSample]:
    """Yield paired samples, degrading each HQ image from its stored seed."""
    records = read_manifest(manifest)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
        records = [records[i] for i in order]
    for rec in records:
        try:
            hq = load_png(rec["hq"])
        except OSError as exc:
            raise ManifestError(f"{manifest}:{rec['line']}: cannot read {rec['hq']} ({exc})") from None
        yield PairedSample(hq=hq, dq=degrade(hq, rec["seed"], cfg), label=rec["label"],
                           seed=rec["seed"], id=rec["id"])
