"""Joint image/mask augmentation: scale, color jitter, flips, rotation, crop.

Steps run in that fixed order. Geometric steps resample the image
bilinearly and the mask with nearest neighbour through the same coordinate
map, with mirror reflection wherever the map leaves the source extent, so
masks never acquire labels they did not already have. Steps whose drawn
parameter is the identity are skipped, which keeps an identity config an
exact pass-through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import map_coordinates

from .dataset import Sample
from .errors import ConfigError, ShapeError

DEFAULT_CROP = (768, 768)


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.2
    contrast: float = 0.2
    hue: float = 0.1
    saturation: float = 0.1
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    crop: tuple[int, int] = DEFAULT_CROP

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        if min(self.crop) < 1 or len(self.crop) != 2:
            raise ConfigError(f"crop must be two positive sizes, got {self.crop}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} variation must lie in [0, 1)")
        if not 0.0 <= self.hue <= 0.5 or self.rotation_degrees < 0:
            raise ConfigError("hue must lie in [0, 0.5] and rotation_degrees be >= 0")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        object.__setattr__(self, "crop", (int(self.crop[0]), int(self.crop[1])))

    @classmethod
    def identity(cls, crop: tuple[int, int]) -> AugmentConfig:
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, crop)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    brightness: float
    contrast: float
    hue: float
    saturation: float
    flip_h: bool
    flip_v: bool
    angle: float
    crop_u: float
    crop_v: float


def jitter_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """One draw of every random quantity; always consumes the same number of draws."""
    scale = rng.uniform(*cfg.scale_range)
    b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    h = rng.uniform(-cfg.hue, cfg.hue)
    s = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    flip_h = bool(rng.random() < cfg.flip_prob)
    flip_v = bool(rng.random() < cfg.flip_prob)
    angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    u, v = rng.random(), rng.random()
    return AugmentParams(float(scale), float(b), float(c), float(h), float(s), flip_h, flip_v,
                         float(angle), float(u), float(v))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map integer positions onto ``[0, n)`` by mirror reflection (edge not repeated)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _resample(image: np.ndarray, mask: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample at ``coords`` ([2, H', W'] source row/col positions)."""
    out = np.stack([
        map_coordinates(ch, coords, order=1, mode="mirror", prefilter=False) for ch in image
    ])
    lab = map_coordinates(mask, coords, order=0, mode="mirror", prefilter=False)
    return np.clip(out, 0.0, 1.0).astype(np.float32), lab.astype(mask.dtype)


def _scale(image, mask, factor):
    h, w = mask.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return image, mask
    rows = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    cols = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    return _resample(image, mask, coords)


def _color(image, p: AugmentParams):
    x = image.astype(np.float64)
    changed = False
    if p.brightness != 1.0:
        x = np.clip(x * p.brightness, 0.0, 1.0)
        changed = True
    if p.contrast != 1.0:
        m = x.mean()
        x = np.clip(m + p.contrast * (x - m), 0.0, 1.0)
        changed = True
    if x.shape[0] == 3 and (p.hue != 0.0 or p.saturation != 1.0):
        hsv = rgb_to_hsv(x.transpose(1, 2, 0))
        hsv[..., 0] = np.mod(hsv[..., 0] + p.hue, 1.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation, 0.0, 1.0)
        x = np.clip(hsv_to_rgb(hsv), 0.0, 1.0).transpose(2, 0, 1)
        changed = True
    return x.astype(np.float32) if changed else image


def _rotate(image, mask, degrees):
    if degrees == 0.0:
        return image, mask
    h, w = mask.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = math.cos(theta), math.sin(theta)
    # inverse map: output pixel -> source position
    src_r = cos * rr - sin * cc + cy
    src_c = sin * rr + cos * cc + cx
    return _resample(image, mask, np.stack([src_r, src_c]))


def _crop(image, mask, size, u, v):
    h, w = mask.shape
    ch, cw = size

    def offset(n, c, frac):
        if n >= c:
            return min(int(frac * (n - c + 1)), n - c)
        return -((c - n) // 2)

    top, left = offset(h, ch, u), offset(w, cw, v)
    if top >= 0 and left >= 0 and top + ch <= h and left + cw <= w:
        return image[:, top:top + ch, left:left + cw], mask[top:top + ch, left:left + cw]
    rows = reflect_index(np.arange(top, top + ch), h)
    cols = reflect_index(np.arange(left, left + cw), w)
    return image[:, rows][:, :, cols], mask[np.ix_(rows, cols)]


def apply_params(sample: Sample, cfg: AugmentConfig, p: AugmentParams) -> Sample:
    image, mask = sample.image, sample.mask
    if mask.shape[0] < 2 or mask.shape[1] < 2:
        raise ShapeError(f"sample {sample.name!r} is smaller than 2x2: {mask.shape}")
    image, mask = _scale(image, mask, p.scale)
    image = _color(image, p)
    if p.flip_h:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if p.flip_v:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    image, mask = _rotate(image, mask, p.angle)
    image, mask = _crop(image, mask, cfg.crop, p.crop_u, p.crop_v)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.source_id, sample.name)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    return apply_params(sample, cfg, jitter_params(cfg, rng))
