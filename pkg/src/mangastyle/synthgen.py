"""Procedural (colorized, screentone, flat) triplets with a fixed painting style.

Scenes are a handful of hard-edged ellipses and convex polygons filled with
palette colors on white paper. The colorized page applies one colorist's
"style" to every shape: a shadow ramp facing away from the light, plus a
specular spot on the lit side. The screentone page is the ordered-dither
halftone of the colorized page's luminance, standing in for the tone
extraction filter used on real manga.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ImageTriplet, save_triplet, write_manifest

REC601 = np.array([0.299, 0.587, 0.114])

DEFAULT_PALETTE = (
    (229, 57, 53),
    (30, 136, 229),
    (67, 160, 71),
    (253, 216, 53),
    (142, 36, 170),
    (255, 143, 0),
    (0, 172, 193),
    (244, 143, 177),
)


@dataclass(frozen=True)
class StyleParams:
    shade_strength: float = 0.55
    highlight_strength: float = 0.6
    gradient_softness: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.shade_strength <= 1.0:
            raise ValueError("shade_strength must lie in [0, 1]")
        if not 0.0 <= self.highlight_strength <= 1.0:
            raise ValueError("highlight_strength must lie in [0, 1]")
        if not self.gradient_softness > 0.0:
            raise ValueError("gradient_softness must be positive")


@dataclass(frozen=True)
class HalftoneParams:
    matrix_size: int = 4
    levels: int = 2

    def __post_init__(self):
        if self.matrix_size not in (2, 4, 8):
            raise ValueError("matrix_size must be 2, 4 or 8")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int] = (128, 128)
    n_shapes: int = 4
    palette: tuple = DEFAULT_PALETTE
    light_dir: tuple[float, float] = (0.0, -1.0)
    style: StyleParams = field(default_factory=StyleParams)
    tone: HalftoneParams = field(default_factory=HalftoneParams)

    def __post_init__(self):
        if self.n_shapes < 1:
            raise ValueError("n_shapes must be at least 1")
        if len(self.palette) == 0:
            raise ValueError("palette must not be empty")
        norm = math.hypot(*self.light_dir)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"light_dir must be a unit vector, got norm {norm}")


def bayer_matrix(n: int) -> np.ndarray:
    """n×n Bayer index matrix holding each of 0..n²-1 exactly once."""
    m = np.zeros((1, 1), dtype=np.int64)
    while m.shape[0] < n:
        m = np.block([[4 * m + 0, 4 * m + 2], [4 * m + 3, 4 * m + 1]])
    return m


def luminance(rgb: np.ndarray) -> np.ndarray:
    """3×h×w in [0,1] → 1×h×w Rec.601 luma."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return np.tensordot(REC601, rgb, axes=(0, 0))[None]


def halftone(gray: np.ndarray, p: HalftoneParams = HalftoneParams()) -> np.ndarray:
    """Ordered dithering of a 1×h×w image in [0,1].

    With ``levels == 2`` the result is binary: 1 (white) where the pixel is at
    least the tiled threshold ``(k + 0.5) / n²``, else 0. More levels dither
    between neighbouring gray steps ``j / (levels - 1)``.
    """
    gray = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    n = p.matrix_size
    h, w = gray.shape[-2:]
    thresholds = (bayer_matrix(n) + 0.5) / (n * n)
    tiled = np.tile(thresholds, (-(-h // n), -(-w // n)))[:h, :w]
    scaled = gray * (p.levels - 1)
    base = np.floor(scaled)
    out = base + (scaled - base >= tiled)
    return np.minimum(out, p.levels - 1) / (p.levels - 1)


def _shape_masks(spec: SceneSpec, rng: np.random.Generator):
    h, w = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    scale = min(h, w)
    for _ in range(spec.n_shapes):
        cy = rng.uniform(0.15, 0.85) * h
        cx = rng.uniform(0.15, 0.85) * w
        radius = rng.uniform(0.12, 0.28) * scale
        color = spec.palette[int(rng.integers(len(spec.palette)))]
        if rng.random() < 0.5:
            aspect = rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, math.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            mask = (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1.0
        else:
            k = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * math.pi, k))
            px = cx + radius * np.cos(angles)
            py = cy + radius * np.sin(angles)
            mask = np.ones((h, w), dtype=bool)
            # vertices are sorted by angle around an interior point, so the polygon is convex
            for i in range(k):
                x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % k], py[(i + 1) % k]
                mask &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
            if not mask.any():
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        yield mask, (cy, cx, radius), np.array(color, dtype=np.float64) / 255.0, (yy, xx)


def _stylize(color, geometry, grid, light_dir, style: StyleParams):
    """Per-pixel shaded color of one shape over the whole canvas."""
    cy, cx, radius = geometry
    yy, xx = grid
    ly, lx = light_dir[1], light_dir[0]
    # t = +1 on the side facing the light, -1 on the far side
    t = np.clip(((xx - cx) * lx + (yy - cy) * ly) / radius, -1.0, 1.0)
    shadow = 1.0 / (1.0 + np.exp(t / style.gradient_softness))
    shaded = color[:, None, None] * (1.0 - style.shade_strength * shadow)[None]
    hy, hx = cy + 0.45 * radius * ly, cx + 0.45 * radius * lx
    spot = np.exp(-((yy - hy) ** 2 + (xx - hx) ** 2) / (2 * (0.22 * radius) ** 2))
    return shaded + style.highlight_strength * spot[None] * (1.0 - shaded)


def _to_uint8(chw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def generate_scene(spec: SceneSpec, id: str | None = None) -> ImageTriplet:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    flat = np.ones((3, h, w))
    colorized = np.ones((3, h, w))
    for mask, geometry, color, grid in _shape_masks(spec, rng):
        flat[:, mask] = color[:, None]
        colorized[:, mask] = _stylize(color, geometry, grid, spec.light_dir, spec.style)[:, mask]
    color8 = _to_uint8(colorized)
    tone = halftone(luminance(color8.transpose(2, 0, 1) / 255.0), spec.tone)
    return ImageTriplet(
        id=id if id is not None else f"scene{spec.seed:06d}",
        colorized=color8,
        screentone=np.round(tone * 255.0).astype(np.uint8).transpose(1, 2, 0),
        flat=_to_uint8(flat),
    )


def scene_spec(seed: int, canvas=(128, 128), style: StyleParams | None = None, **kw) -> SceneSpec:
    """Draw the per-page parts of a scene (shape count, light direction) from ``seed``."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    angle = rng.uniform(0, 2 * math.pi)
    kw.setdefault("n_shapes", int(rng.integers(3, 7)))
    kw.setdefault("light_dir", (math.cos(angle), math.sin(angle)))
    return SceneSpec(seed=seed, canvas=tuple(canvas), style=style or StyleParams(), **kw)


def generate_dataset(n: int, base_seed: int, out, canvas=(128, 128), style: StyleParams | None = None) -> list[str]:
    """Write ``n`` triplets plus ``manifest.txt`` under ``out``; return the ids in order."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        page_id = f"page{i:04d}"
        t = generate_scene(scene_spec(base_seed * 100003 + i, canvas=canvas, style=style), id=page_id)
        save_triplet(out, t)
        ids.append(page_id)
    write_manifest(out, ids)
    return ids
