"""Deterministic preprocessing (CLAHE, resize, Z-score) and the stochastic
linear-augmentation pipeline applied to training images.

Pipeline order: CLAHE -> resize -> stochastic augs -> Z-score. Z-score is
applied by the network's input stage so that every image handled outside
the model stays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

N_BINS = 256

AUG_ORDER = ("brightness", "contrast", "crop", "rotation", "hflip", "vflip")


@dataclass
class PreprocessConfig:
    clip_limit: float = 2.0
    tiles: tuple[int, int] = (8, 8)
    target_size: tuple[int, int] = (224, 224)
    zscore: bool = True
    clahe_enabled: bool = True

    def __post_init__(self):
        self.tiles = tuple(int(t) for t in self.tiles)
        self.target_size = tuple(int(t) for t in self.target_size)
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be positive")
        if min(self.tiles) < 1:
            raise ValueError("tiles must be at least (1, 1)")
        if min(self.target_size) < 32:
            raise ValueError("target_size must be at least (32, 32)")


@dataclass
class StochasticAugConfig:
    brightness_range: tuple[float, float] = (0.5, 1.0)
    contrast_range: tuple[float, float] = (0.7, 1.0)
    rotation_range: tuple[float, float] = (0.0, 120.0)
    crop_scale: tuple[float, float] = (0.8, 1.0)
    enabled: tuple[str, ...] = ("brightness", "contrast", "crop")
    max_ops_per_sample: int = 2

    def __post_init__(self):
        self.enabled = tuple(self.enabled)
        unknown = set(self.enabled) - set(AUG_ORDER)
        if unknown:
            raise ValueError(f"unknown stochastic augmentations: {sorted(unknown)}")
        lo, hi = self.brightness_range
        if not 0.5 <= lo <= hi <= 1.0:
            raise ValueError("brightness_range must lie within [0.5, 1.0]")
        lo, hi = self.contrast_range
        if not 0.7 <= lo <= hi <= 1.0:
            raise ValueError("contrast_range must lie within [0.7, 1.0]")
        lo, hi = self.rotation_range
        if not 0.0 <= lo <= hi <= 120.0:
            raise ValueError("rotation_range must lie within [0, 120] degrees")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale must lie within (0, 1]")
        if not 0 <= self.max_ops_per_sample <= len(self.enabled):
            raise ValueError("max_ops_per_sample exceeds the number of enabled transforms")


# spread below this counts as a constant image (rounding noise of a flat fill)
FLAT_STD = 1e-6


def zscore_normalize(image: np.ndarray) -> np.ndarray:
    """Per-image standardization; (numerically) constant images map to zeros."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if not std > FLAT_STD:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``(H, W)``; a same-size request returns a copy."""
    h, w = size
    image = np.asarray(image, dtype=np.float32)
    if image.shape == (h, w):
        return image.copy()
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 256 integer bins (bin v covers [v/256, (v+1)/256))."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * N_BINS), 0, N_BINS - 1).astype(np.intp)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def _equalize_lut(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Mid-rank equalization LUT of one (clipped) histogram, values in [0, 1]."""
    hist = hist.astype(np.float64)
    total = hist.sum()
    if np.isfinite(clip_limit):
        # fractional limits are kept: a floor of one count would leave small tiles nearly unclipped
        limit = clip_limit * total / N_BINS
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / N_BINS
    cdf = np.cumsum(hist)
    # mid-rank of each bin: a constant tile under heavy clipping maps to itself
    return (cdf - 0.5 * hist) / total


def clahe(image: np.ndarray, config: PreprocessConfig | None = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Each tile's 256-bin histogram is clipped at ``clip_limit`` times the
    mean bin count, the excess is spread uniformly over all bins, and each
    pixel's output is the bilinear blend of the four nearest tile mappings.
    ``clip_limit=inf`` disables clipping.
    """
    config = config or PreprocessConfig()
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    tr, tc = config.tiles
    if tr > h or tc > w:
        raise ValueError(f"tiles {config.tiles} larger than image {image.shape}")
    q = quantize(image)
    ye, xe = _tile_edges(h, tr), _tile_edges(w, tc)
    luts = np.empty((tr, tc, N_BINS))
    for i in range(tr):
        for j in range(tc):
            tile = q[ye[i]:ye[i + 1], xe[j]:xe[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=N_BINS)
            luts[i, j] = _equalize_lut(hist, config.clip_limit)

    # fractional tile coordinates of every pixel relative to tile centers
    fy = np.clip((np.arange(h) + 0.5) * tr / h - 0.5, 0, tr - 1)
    fx = np.clip((np.arange(w) + 0.5) * tc / w - 0.5, 0, tc - 1)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, tr - 1)
    x1 = np.minimum(x0 + 1, tc - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    out = ((1 - wy) * (1 - wx) * luts[Y0, X0, q]
           + (1 - wy) * wx * luts[Y0, X1, q]
           + wy * (1 - wx) * luts[Y1, X0, q]
           + wy * wx * luts[Y1, X1, q])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_image(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Deterministic part of the pipeline: optional CLAHE then resize."""
    if config.clahe_enabled:
        image = clahe(image, config)
    return resize(image, config.target_size)


# ---------------------------------------------------------------------------
# stochastic linear augmentations


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return image * np.float32(factor)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = np.float32(image.mean())
    return mean + np.float32(factor) * (image - mean)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-frame pixels are filled with 0."""
    if degrees == 0:
        return image.copy()
    h, w = image.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
    return cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)


def random_resized_crop(image: np.ndarray, scale: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    area = rng.uniform(*scale)
    ch = max(1, min(h, int(round(h * np.sqrt(area)))))
    cw = max(1, min(w, int(round(w * np.sqrt(area)))))
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    return resize(image[y:y + ch, x:x + cw], (h, w))


def apply_stochastic_augs(image: np.ndarray, config: StochasticAugConfig, rng: np.random.Generator,
                          target_size: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Apply a random subset of the enabled transforms, in canonical order.

    The subset size is uniform in ``[0, max_ops_per_sample]`` and the subset
    itself uniform among subsets of that size. Output is resized to
    ``target_size`` and clamped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float32)
    enabled = [t for t in AUG_ORDER if t in config.enabled]
    n_ops = int(rng.integers(0, config.max_ops_per_sample + 1)) if enabled else 0
    chosen = set(rng.choice(enabled, size=n_ops, replace=False).tolist()) if n_ops else set()
    out = image
    for t in AUG_ORDER:
        if t not in chosen:
            continue
        if t == "brightness":
            out = adjust_brightness(out, rng.uniform(*config.brightness_range))
        elif t == "contrast":
            out = adjust_contrast(out, rng.uniform(*config.contrast_range))
        elif t == "crop":
            out = random_resized_crop(out, config.crop_scale, rng)
        elif t == "rotation":
            out = rotate(out, rng.uniform(*config.rotation_range))
        elif t == "hflip":
            out = out[:, ::-1]
        elif t == "vflip":
            out = out[::-1, :]
    out = resize(np.ascontiguousarray(out), target_size)
    return np.clip(out, 0.0, 1.0)
