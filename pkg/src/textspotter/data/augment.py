"""Training augmentation: random resize, text-preserving crop and rotation.

All steps work on pixel coordinates and carry the polygons through the same
affine maps as the image, so boxes stay equal to the polygons' hulls.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from PIL import Image

from ..config import DataConfig
from .sample import SpottingSample, TextInstance

logger = logging.getLogger(__name__)

FULL_SCALE_SHORT = list(range(640, 897, 32))
FULL_SCALE_MAX_LONG = 1600


def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8))


def _from_pil(img: Image.Image) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def _rebuild(image: np.ndarray, pixel_polys: list[np.ndarray], sample: SpottingSample) -> SpottingSample:
    h, w = image.shape[:2]
    scale = np.array([w, h], dtype=np.float64)
    instances = [
        TextInstance(p / scale, inst.transcript, inst.ignore) for p, inst in zip(pixel_polys, sample.instances)
    ]
    return SpottingSample(image, instances)


def choose_resize(h: int, w: int, shorts: list[int], max_long: int, rng: np.random.Generator) -> tuple[int, int, int]:
    """Pick a target shorter side from ``shorts``; prefer values that keep the long side within ``max_long``."""
    short, long = min(h, w), max(h, w)
    admissible = [s for s in shorts if round(long * s / short) <= max_long]
    pool = admissible or [min(shorts)]
    target = int(pool[int(rng.integers(len(pool)))])
    if not admissible:
        logger.warning("no shorter side in %s keeps the long side within %d", shorts, max_long)
    scale = target / short
    return target, int(round(h * scale)), int(round(w * scale))


def random_resize(sample: SpottingSample, rng, shorts: list[int], max_long: int) -> SpottingSample:
    h, w = sample.size
    _, nh, nw = choose_resize(h, w, shorts, max_long, rng)
    image = _from_pil(_to_pil(sample.image).resize((nw, nh), Image.BILINEAR))
    sx, sy = nw / w, nh / h
    polys = [p * np.array([sx, sy]) for p in sample.pixel_polygons()]
    return _rebuild(image, polys, sample)


def random_crop(sample: SpottingSample, rng, min_fraction: float = 0.6, tries: int = 10) -> SpottingSample:
    """Crop a window that contains every text polygon whole; skip when no such window is found."""
    h, w = sample.size
    polys = sample.pixel_polygons()
    if not polys:
        return sample
    pts = np.concatenate(polys)
    x_lo, y_lo = np.floor(pts.min(0)).astype(int)
    x_hi, y_hi = np.ceil(pts.max(0)).astype(int)
    x_lo, y_lo = max(x_lo, 0), max(y_lo, 0)
    x_hi, y_hi = min(x_hi, w), min(y_hi, h)
    for _ in range(tries):
        x0 = int(rng.integers(0, x_lo + 1))
        y0 = int(rng.integers(0, y_lo + 1))
        x1 = int(rng.integers(x_hi, w + 1))
        y1 = int(rng.integers(y_hi, h + 1))
        if (x1 - x0) >= min_fraction * w and (y1 - y0) >= min_fraction * h:
            break
    else:
        logger.debug("crop skipped: no window keeps all text")
        return sample
    image = sample.image[y0:y1, x0:x1].copy()
    return _rebuild(image, [p - np.array([x0, y0]) for p in polys], sample)


def rotation_matrix(angle_deg: float, h: int, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """2x3 pixel-space map for a counter-clockwise rotation about the image center on an enlarged canvas."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    nw = int(math.ceil(abs(w * c) + abs(h * s)))
    nh = int(math.ceil(abs(w * s) + abs(h * c)))
    # image y points down, so a visually counter-clockwise turn uses this sign pattern
    rot = np.array([[c, s], [-s, c]])
    shift = np.array([nw / 2, nh / 2]) - rot @ np.array([w / 2, h / 2])
    return np.hstack([rot, shift[:, None]]), (nh, nw)


def rotate(sample: SpottingSample, angle_deg: float) -> SpottingSample:
    h, w = sample.size
    m, (nh, nw) = rotation_matrix(angle_deg, h, w)
    inv = np.linalg.inv(np.vstack([m, [0, 0, 1]]))[:2]
    img = _to_pil(sample.image).transform(
        (nw, nh), Image.AFFINE, data=tuple(inv.reshape(-1)), resample=Image.BILINEAR
    )
    polys = [p @ m[:, :2].T + m[:, 2] for p in sample.pixel_polygons()]
    return _rebuild(_from_pil(img), polys, sample)


def augment(sample: SpottingSample, rng: np.random.Generator, config: DataConfig) -> SpottingSample:
    """Resize, crop, rotate. Steps with empty or zero ranges are skipped, so a no-op config returns the input."""
    shorts = FULL_SCALE_SHORT if config.full_scale_augment else list(config.resize_short)
    max_long = FULL_SCALE_MAX_LONG if config.full_scale_augment else config.resize_max_long
    out = sample
    if shorts:
        out = random_resize(out, rng, shorts, max_long)
    if config.crop_probability > 0 and rng.random() < config.crop_probability:
        out = random_crop(out, rng)
    if config.rotation_degrees > 0:
        angle = float(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
        out = rotate(out, angle)
    return out


def eval_resize(sample: SpottingSample, short: int, max_long: int) -> SpottingSample:
    """Deterministic resize used at evaluation time: shorter side to ``short``, long side capped."""
    h, w = sample.size
    scale = min(short / min(h, w), max_long / max(h, w))
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) == (h, w):
        return sample
    image = _from_pil(_to_pil(sample.image).resize((nw, nh), Image.BILINEAR))
    return SpottingSample(image, sample.instances)

