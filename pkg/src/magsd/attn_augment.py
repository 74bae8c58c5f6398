"""Attention-guided augmentation: attention mixup, patching and dimming.

All transforms take and return single images in [0, 1] at network
resolution; attention maps are at the coarse grid and are scaled up as
needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import normalize_attention
from .dataset import Box
from .preprocess import resize

AUGMENTATIONS = ("mixup", "patch", "dim")


@dataclass
class AugmentConfig:
    theta_m: float = 0.5
    theta_d: float = 0.5
    gamma: float | tuple[float, float] = 0.5
    dim_factor: float = 0.1
    enabled: tuple[str, ...] = AUGMENTATIONS

    def __post_init__(self):
        self.enabled = tuple(self.enabled)
        unknown = set(self.enabled) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}; choose from {AUGMENTATIONS}")
        gammas = self.gamma if isinstance(self.gamma, tuple) else (self.gamma,)
        for name, v in [("theta_m", self.theta_m), ("theta_d", self.theta_d),
                        ("dim_factor", self.dim_factor)] + [("gamma", g) for g in gammas]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if isinstance(self.gamma, tuple) and (len(self.gamma) != 2 or self.gamma[0] > self.gamma[1]):
            raise ValueError("gamma interval must be (lo, hi) with lo <= hi")

    def draw_gamma(self, rng: np.random.Generator) -> float:
        if isinstance(self.gamma, tuple):
            return float(rng.uniform(*self.gamma))
        return float(self.gamma)


@dataclass
class BinaryRegion:
    mask: np.ndarray
    bbox: Box


def threshold_region(norm_map: np.ndarray, theta: float, image_size: tuple[int, int]) -> BinaryRegion:
    """D = (A* > theta) and its enclosing box scaled to image coordinates.

    An empty D falls back to the full-image box.
    """
    norm_map = np.asarray(norm_map)
    mask = norm_map > theta
    h, w = image_size
    sh, sw = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return BinaryRegion(mask, Box(0, 0, w, h))
    box = Box(math.floor(cols[0] * w / sw), math.floor(rows[0] * h / sh),
              math.ceil((cols[-1] + 1) * w / sw), math.ceil((rows[-1] + 1) * h / sh))
    return BinaryRegion(mask, box)


def _widen(lo: int, hi: int, limit: int, minimum: int = 2) -> tuple[int, int]:
    if hi - lo >= minimum:
        return lo, hi
    lo = max(0, min(lo, limit - minimum))
    return lo, min(limit, lo + minimum)


def attention_mixup(image: np.ndarray, region: BinaryRegion, gamma: float) -> np.ndarray:
    """I1 = gamma * I0 + (1 - gamma) * B, B = bbox crop enlarged to full size."""
    h, w = image.shape
    b = region.bbox
    x0, x1 = _widen(b.x0, b.x1, w)
    y0, y1 = _widen(b.y0, b.y1, h)
    enlarged = resize(image[y0:y1, x0:x1], (h, w))
    out = np.float32(gamma) * image + np.float32(1.0 - gamma) * enlarged
    return np.clip(out, 0.0, 1.0)


def attention_patching(image: np.ndarray, region: BinaryRegion, rng: np.random.Generator) -> np.ndarray:
    """Paste a copy of the bbox content at a random in-frame location.

    Locations that do not overlap the source box are preferred; if none
    exists, any in-frame location is used.
    """
    h, w = image.shape
    b = region.bbox
    ph, pw = b.y1 - b.y0, b.x1 - b.x0
    patch = image[b.y0:b.y1, b.x0:b.x1].copy()
    ys = np.arange(h - ph + 1)[:, None]
    xs = np.arange(w - pw + 1)[None, :]
    free = (ys + ph <= b.y0) | (ys >= b.y1) | (xs + pw <= b.x0) | (xs >= b.x1)
    candidates = np.argwhere(free)
    if candidates.size == 0:
        candidates = np.argwhere(np.ones_like(free))
    y, x = candidates[int(rng.integers(len(candidates)))]
    out = image.copy()
    out[y:y + ph, x:x + pw] = patch
    return out


def dimming_mask(norm_map: np.ndarray, theta_d: float, dim_factor: float, image_size: tuple[int, int]) -> np.ndarray:
    up = resize(np.asarray(norm_map, dtype=np.float32), image_size)
    return np.where(up > theta_d, np.float32(dim_factor), np.float32(1.0)).astype(np.float32)


def attention_dimming(image: np.ndarray, norm_map: np.ndarray, theta_d: float = 0.5,
                      dim_factor: float = 0.1) -> np.ndarray:
    """I3 = I0 * DM, DM = dim_factor where the upsampled map exceeds theta_d, else 1."""
    return image * dimming_mask(norm_map, theta_d, dim_factor, image.shape)


def make_auxiliary_batch(images: np.ndarray, attention: np.ndarray, config: AugmentConfig,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build the (I1, I2, I3) batches from (B, H, W) images and (B, N, S, S) attention.

    Each enabled augmentation draws its own map index per sample; disabled
    ones pass the input through unchanged.
    """
    images = np.asarray(images, dtype=np.float32)
    attention = np.asarray(attention)
    if images.shape[0] != attention.shape[0]:
        raise ValueError("image and attention batch sizes differ")
    n_maps = attention.shape[1]
    size = images.shape[1:]
    out = [images.copy(), images.copy(), images.copy()]
    for i in range(images.shape[0]):
        img = images[i]
        if "mixup" in config.enabled:
            a = normalize_attention(attention[i], int(rng.integers(n_maps)))
            out[0][i] = attention_mixup(img, threshold_region(a, config.theta_m, size), config.draw_gamma(rng))
        if "patch" in config.enabled:
            a = normalize_attention(attention[i], int(rng.integers(n_maps)))
            out[1][i] = attention_patching(img, threshold_region(a, config.theta_m, size), rng)
        if "dim" in config.enabled:
            a = normalize_attention(attention[i], int(rng.integers(n_maps)))
            out[2][i] = attention_dimming(img, a, config.theta_d, config.dim_factor)
    return out[0], out[1], out[2]
