"""Synthetic scene-text images.

Words are drawn glyph by glyph along a quadratic Bezier center line (straight
when the control point sits on the chord), onto a smooth noisy background.
Each word gets a 16-point polygon: 8 points along the top of its text band,
left to right, then 8 along the bottom, right to left.
"""
from __future__ import annotations

import logging
from functools import lru_cache
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont
from shapely.geometry import Polygon

from ..config import DataConfig
from .charset import Charset
from .sample import SpottingSample, TextInstance

logger = logging.getLogger(__name__)

FONT_PATH = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / "DejaVuSans-Bold.ttf"
POINTS_PER_SIDE = 8


@lru_cache(maxsize=32)
def load_font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(str(FONT_PATH), size)


@lru_cache(maxsize=32)
def band_extent(size: int, characters: str) -> tuple[float, float]:
    """Top and bottom of the union glyph box relative to the baseline (y down)."""
    font = load_font(size)
    tops, bottoms = [], []
    for ch in characters:
        _, top, _, bottom = font.getbbox(ch, anchor="ls")
        tops.append(top)
        bottoms.append(bottom)
    return float(min(tops)), float(max(bottoms))


class CenterLine:
    """Quadratic Bezier with arc-length lookup."""

    def __init__(self, p0, p1, p2, samples: int = 256):
        self.ctrl = np.array([p0, p1, p2], dtype=np.float64)
        t = np.linspace(0.0, 1.0, samples)
        pts = self.point_at(t)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self._t = t
        self._s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def point_at(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        p0, p1, p2 = self.ctrl
        return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2

    def tangent_at(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        p0, p1, p2 = self.ctrl
        d = 2 * (1 - t) * (p1 - p0) + 2 * t * (p2 - p1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def t_at(self, s):
        return np.interp(s, self._s, self._t)

    def frame(self, s):
        """Point, unit tangent and unit normal (pointing down the glyphs) at arc length ``s``."""
        t = self.t_at(s)
        p = self.point_at(t)
        tan = self.tangent_at(t)
        normal = np.stack([-tan[..., 1], tan[..., 0]], axis=-1)
        return p, tan, normal


def random_word(rng: np.random.Generator, charset: Charset, min_len: int, max_len: int) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    chars = charset.characters
    return "".join(chars[int(i)] for i in rng.integers(0, len(chars), size=n))


def _background(rng: np.random.Generator, h: int, w: int, light: bool) -> np.ndarray:
    base = rng.uniform(0.6, 0.95, size=3) if light else rng.uniform(0.05, 0.35, size=3)
    coarse = rng.uniform(-0.12, 0.12, size=(4, 4, 3))
    noise = np.stack(
        [
            np.asarray(Image.fromarray(coarse[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
            for c in range(3)
        ],
        axis=-1,
    )
    img = np.clip(base[None, None, :] + noise + rng.normal(0, 0.02, size=(h, w, 3)), 0, 1)
    canvas = Image.fromarray((img * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(0, 4))):
        x0, x1 = sorted(rng.uniform(0, w, size=2))
        y0, y1 = sorted(rng.uniform(0, h, size=2))
        shade = tuple(int(v) for v in np.clip((base + rng.uniform(-0.15, 0.15, 3)) * 255, 0, 255))
        if rng.random() < 0.5:
            draw.line([(x0, y0), (x1, y1)], fill=shade, width=int(rng.integers(1, 3)))
        else:
            draw.ellipse([x0, y0, x1, y1], outline=shade)
    return np.asarray(canvas, dtype=np.float32) / 255.0


def _layout(word: str, font_size: int, charset: Charset, rng, config: DataConfig):
    """Glyph centers and polygon for ``word`` in a local frame starting at the origin."""
    font = load_font(font_size)
    advances = np.array([font.getlength(ch) for ch in word])
    spacing = 0.05 * font_size
    width = float(advances.sum() + spacing * (len(word) - 1))
    angle = np.deg2rad(rng.uniform(-20, 20)) if rng.random() < 0.5 else 0.0
    bend = 0.0
    if rng.random() < config.curve_probability:
        bend = rng.uniform(-1, 1) * config.max_curvature * width
    chord = width * 1.02
    p0 = np.array([0.0, 0.0])
    p2 = np.array([chord, 0.0])
    p1 = np.array([chord / 2, 2 * bend])
    # stretch the chord until the arc is long enough for all glyphs
    line = CenterLine(p0, p1, p2)
    for _ in range(20):
        if line.length >= width * 1.02:
            break
        chord *= width * 1.02 / line.length
        p2 = np.array([chord, 0.0])
        p1 = np.array([chord / 2, 2 * bend])
        line = CenterLine(p0, p1, p2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    line = CenterLine(*(c @ rot.T for c in (p0, p1, p2)))
    start = (line.length - width) / 2
    centers = start + np.cumsum(advances + spacing) - spacing - advances / 2
    top, bottom = band_extent(font_size, charset.characters)
    half = (bottom - top) / 2 + 0.08 * font_size + 1.0
    s = np.linspace(start - 0.04 * font_size, start + width + 0.04 * font_size, POINTS_PER_SIDE)
    p, _, n = line.frame(s)
    polygon = np.concatenate([p - half * n, (p + half * n)[::-1]])
    return line, centers, polygon, (top + bottom) / 2


def _render_word(canvas_alpha: Image.Image, word: str, font_size: int, line: CenterLine, centers, band_mid, offset):
    font = load_font(font_size)
    size = int(np.ceil(font_size * 2.2))
    for ch, s in zip(word, centers):
        p, tan, _ = line.frame(np.array(s))
        glyph = Image.new("L", (size, size), 0)
        ImageDraw.Draw(glyph).text((size / 2, size / 2 - band_mid), ch, font=font, fill=255, anchor="ms")
        deg = float(np.degrees(np.arctan2(tan[1], tan[0])))
        glyph = glyph.rotate(-deg, resample=Image.BILINEAR, center=(size / 2, size / 2))
        x = int(round(p[0] + offset[0] - size / 2))
        y = int(round(p[1] + offset[1] - size / 2))
        region = (x, y, x + size, y + size)
        current = canvas_alpha.crop(region)
        canvas_alpha.paste(Image.fromarray(np.maximum(np.asarray(current), np.asarray(glyph))), region[:2])


def generate_sample(
    rng: np.random.Generator,
    config: DataConfig,
    charset: Charset | None = None,
    return_text_mask: bool = False,
):
    """Render one image with ``min_instances..max_instances`` words.

    Placement retries are bounded by ``config.max_placement_tries``; when they
    run out the sample carries fewer words, but at least one is always forced
    in with a smaller font.
    """
    charset = charset or Charset()
    h, w = config.image_size
    light = bool(rng.random() < 0.5)
    image = _background(rng, h, w, light)
    alpha = Image.new("L", (w, h), 0)
    target = int(rng.integers(config.min_instances, config.max_instances + 1))
    instances: list[TextInstance] = []
    taken: list[Polygon] = []
    colors = []
    lo, hi = config.font_size
    def try_place(word: str, size: int) -> bool:
        nonlocal alpha
        line, centers, polygon, band_mid = _layout(word, size, charset, rng, config)
        pmin, pmax = polygon.min(0), polygon.max(0)
        span = pmax - pmin
        if span[0] > w - 4 or span[1] > h - 4:
            return False
        ox = rng.uniform(2 - pmin[0], w - 2 - pmax[0])
        oy = rng.uniform(2 - pmin[1], h - 2 - pmax[1])
        placed = polygon + np.array([ox, oy])
        shape = Polygon(placed)
        if not shape.is_valid or shape.area <= 0:
            return False
        if any(shape.buffer(2.0).intersects(t) for t in taken):
            return False
        word_alpha = Image.new("L", (w, h), 0)
        _render_word(word_alpha, word, size, line, centers, band_mid, (ox, oy))
        taken.append(shape)
        alpha = Image.fromarray(np.maximum(np.asarray(alpha), np.asarray(word_alpha)))
        colors.append((np.asarray(word_alpha, dtype=np.float32) / 255.0, light))
        instances.append(TextInstance(placed / np.array([w, h]), word))
        return True

    tries = 0
    while len(instances) < target and tries < config.max_placement_tries:
        tries += 1
        word = random_word(rng, charset, config.min_word_len, config.max_word_len)
        size = int(rng.integers(lo, hi + 1))
        if tries > config.max_placement_tries // 2:
            size = max(8, int(size * 0.7))
        try_place(word, size)
    # forced fallback: shortest word, shrinking font
    size = lo
    while not instances and target > 0 and size >= 6:
        if not try_place(random_word(rng, charset, config.min_word_len, config.min_word_len), size):
            size -= 2
    if len(instances) < target:
        logger.debug("placed %d of %d words", len(instances), target)
    for a, is_light in colors:
        color = rng.uniform(0.0, 0.25, size=3) if is_light else rng.uniform(0.75, 1.0, size=3)
        a = a[..., None]
        image = image * (1 - a) + color[None, None, :] * a
    image = np.clip(image, 0, 1).astype(np.float32)
    if rng.random() < 0.3:
        blurred = Image.fromarray((image * 255).round().astype(np.uint8)).filter(ImageFilter.GaussianBlur(0.6))
        image = np.asarray(blurred, dtype=np.float32) / 255.0
    sample = SpottingSample(image, instances)
    if return_text_mask:
        return sample, np.asarray(alpha, dtype=np.float32) / 255.0
    return sample


def sample_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a dataset seeded with ``base_seed``."""
    return np.random.default_rng(np.random.SeedSequence([base_seed, index]))
