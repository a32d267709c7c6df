"""Procedural glyph datasets.

Each class owns one glyph (a small vector drawing on the unit square). An
image shows its class glyph under one of three regimes: large and centered,
small on a clean background, or small with distractor glyphs that belong to
no class. Everything is keyed on the spec seed, so the same spec always
produces the same bytes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import SPLITS, Dataset

REGIMES = ("salient-centered", "small-object-clean", "small-object-with-distractors")
VOCABULARIES = ("strokes", "blobs")


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    classes_per_split: tuple = (20, 5, 5)
    images_per_class: int = 60
    image_size: int = 64
    channels: int = 1
    vocabulary: str = "strokes"
    regime_weights: tuple = (0.4, 0.3, 0.3)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.classes_per_split = tuple(int(c) for c in self.classes_per_split)
        self.regime_weights = tuple(float(w) for w in self.regime_weights)
        if len(self.classes_per_split) != 3 or min(self.classes_per_split) < 0:
            raise SynthError("classes_per_split needs three non-negative counts")
        if len(self.regime_weights) != 3 or min(self.regime_weights) < 0 \
                or abs(sum(self.regime_weights) - 1) > 1e-9:
            raise SynthError("regime weights must be three non-negative numbers summing to 1")
        if self.image_size % 16:
            raise SynthError("image_size must be divisible by 16")
        if self.image_size < 32:
            raise SynthError("image_size below 32 px is too small to render glyphs")
        if self.vocabulary not in VOCABULARIES:
            raise SynthError(f"unknown vocabulary {self.vocabulary!r}")
        if self.channels not in (1, 3):
            raise SynthError("channels must be 1 or 3")
        if self.images_per_class <= 0 or self.noise < 0:
            raise SynthError("images_per_class must be positive and noise non-negative")


@dataclass
class Glyph:
    segments: np.ndarray  # (s, 4): x0, y0, x1, y1 in unit coordinates
    ellipses: np.ndarray  # (e, 5): cx, cy, rx, ry, angle
    thickness: float


def make_glyph(rng: np.random.Generator, vocabulary: str) -> Glyph:
    lattice = np.linspace(0.1, 0.9, 5)
    if vocabulary == "strokes":
        n = rng.integers(3, 6)
        segs = []
        while len(segs) < n:
            a = lattice[rng.integers(0, 5, 2)]
            b = lattice[rng.integers(0, 5, 2)]
            if np.hypot(*(a - b)) > 0.3:
                segs.append([a[0], a[1], b[0], b[1]])
        return Glyph(np.array(segs), np.zeros((0, 5)), float(rng.uniform(0.05, 0.08)))
    n = rng.integers(2, 4)
    ell = np.column_stack([rng.uniform(0.25, 0.75, n), rng.uniform(0.25, 0.75, n),
                           rng.uniform(0.08, 0.25, n), rng.uniform(0.08, 0.25, n), rng.uniform(0, np.pi, n)])
    a = lattice[rng.integers(0, 5, 2)]
    b = lattice[rng.integers(0, 5, 2)]
    return Glyph(np.array([[a[0], a[1], b[0], b[1]]]), ell, float(rng.uniform(0.04, 0.06)))


def render_glyph(glyph: Glyph, size: int, angle: float = 0.0) -> np.ndarray:
    """Anti-aliased ink coverage in [0, 1] on a ``size x size`` patch."""
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    u = c * (xx - 0.5) + s * (yy - 0.5) + 0.5
    v = -s * (xx - 0.5) + c * (yy - 0.5) + 0.5
    px = 1.0 / size
    ink = np.zeros((size, size))
    for x0, y0, x1, y1 in glyph.segments:
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        # a zero-length segment renders as a dot
        t = np.clip(((u - x0) * dx + (v - y0) * dy) / length2, 0, 1) if length2 > 0 else 0.0
        dist = np.hypot(u - x0 - t * dx, v - y0 - t * dy)
        ink = np.maximum(ink, np.clip((glyph.thickness / 2 - dist) / px + 0.5, 0, 1))
    for cx, cy, rx, ry, th in glyph.ellipses:
        cu, su = np.cos(th), np.sin(th)
        a = (cu * (u - cx) + su * (v - cy)) / rx
        b = (-su * (u - cx) + cu * (v - cy)) / ry
        rad = np.hypot(a, b)
        edge = (1 - rad) * min(rx, ry) / px + 0.5
        ink = np.maximum(ink, np.clip(edge, 0, 1))
    return ink


def _paste(canvas: np.ndarray, patch: np.ndarray, top: int, left: int, value: float) -> None:
    h, w = patch.shape
    region = canvas[top:top + h, left:left + w]
    np.maximum(region, patch * value, out=region)


@dataclass
class RenderInfo:
    regime: str
    target_box: tuple  # (top, left, size)
    distractors: int


def render_image(glyph: Glyph, distractor_pool: list, regime: str, size: int, noise: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, RenderInfo]:
    canvas = np.zeros((size, size))
    angle = rng.uniform(-0.25, 0.25)
    value = rng.uniform(0.75, 1.0)
    if regime == "salient-centered":
        g = int(round(rng.uniform(0.55, 0.75) * size))
        jitter = int(round(0.04 * size))
        top = (size - g) // 2 + int(rng.integers(-jitter, jitter + 1))
        left = (size - g) // 2 + int(rng.integers(-jitter, jitter + 1))
    else:
        g = int(round(rng.uniform(0.3, 0.42) * size))
        top = int(rng.integers(0, size - g + 1))
        left = int(rng.integers(0, size - g + 1))
    _paste(canvas, render_glyph(glyph, g, angle), top, left, value)
    n_distract = 0
    if regime == "small-object-with-distractors":
        n_distract = int(rng.integers(1, 3))
        for _ in range(n_distract):
            dg = int(round(rng.uniform(0.2, 0.3) * size))
            best = None
            for _ in range(8):
                dt, dl = int(rng.integers(0, size - dg + 1)), int(rng.integers(0, size - dg + 1))
                overlap = max(0, min(top + g, dt + dg) - max(top, dt)) * max(0, min(left + g, dl + dg) - max(left, dl))
                if best is None or overlap < best[0]:
                    best = (overlap, dt, dl)
            other = distractor_pool[int(rng.integers(len(distractor_pool)))]
            _paste(canvas, render_glyph(other, dg, rng.uniform(-0.5, 0.5)), best[1], best[2], rng.uniform(0.6, 0.9))
    canvas += rng.uniform(0.0, 0.15)
    if noise:
        canvas += rng.normal(0.0, noise, canvas.shape)
    return canvas, RenderInfo(regime, (top, left, g), n_distract)


def class_glyphs(spec: SynthSpec) -> list[Glyph]:
    rng = np.random.default_rng([spec.seed, 0x61, VOCABULARIES.index(spec.vocabulary)])
    return [make_glyph(rng, spec.vocabulary) for _ in range(sum(spec.classes_per_split))]


def distractor_glyphs(spec: SynthSpec, count: int = 12) -> list[Glyph]:
    rng = np.random.default_rng([spec.seed, 0xD1, VOCABULARIES.index(spec.vocabulary)])
    return [make_glyph(rng, spec.vocabulary) for _ in range(count)]


def synth_generate(spec: SynthSpec, with_info: bool = False):
    """Render a three-split dataset; class ids are split-major (meta-train first)."""
    glyphs = class_glyphs(spec)
    pool = distractor_glyphs(spec)
    names, splits = [], []
    for split, count in zip(SPLITS, spec.classes_per_split):
        for _ in range(count):
            names.append(f"{spec.vocabulary}-{len(names):03d}")
            splits.append(split)
    m = len(names) * spec.images_per_class
    images = np.empty((m, spec.image_size, spec.image_size, spec.channels), dtype=np.uint8)
    labels = np.repeat(np.arange(len(names)), spec.images_per_class)
    infos = []
    for c in range(len(names)):
        rng = np.random.default_rng([spec.seed, 0x1A, c])
        tint = rng.uniform(0.6, 1.0, spec.channels) if spec.channels > 1 else np.ones(1)
        for k in range(spec.images_per_class):
            regime = REGIMES[int(rng.choice(3, p=spec.regime_weights))]
            canvas, info = render_image(glyphs[c], pool, regime, spec.image_size, spec.noise, rng)
            pix = np.clip(np.rint(canvas[..., None] * tint * 255), 0, 255).astype(np.uint8)
            images[c * spec.images_per_class + k] = pix
            infos.append(info)
    ds = Dataset(images, labels, tuple(names), tuple(splits), name=f"synth-{spec.vocabulary}-{spec.seed}")
    return (ds, infos) if with_info else ds
