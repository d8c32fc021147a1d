"""Deterministic synthetic slides for tests and memory scenarios.

A synthetic slide is a white background with elliptical "tissue" blobs and
dark "nuclei" dots.  All geometry derives from a seeded generator, and any
region of any level can be rendered analytically.  Two access paths share
one renderer: :func:`generate_synthetic_slide` materializes every level into
a writable pyramid, while :class:`SyntheticPyramid` renders regions on
demand so a 100,000 x 100,000 virtual slide costs no storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pyramid import (
    DEFAULT_POLICY,
    STORAGE_PROCEDURAL,
    ArrayPyramid,
    ImagePyramid,
    PyramidPolicy,
    create_pyramid,
    plan_levels,
)

BACKGROUND = (255, 255, 255)


@dataclass(frozen=True)
class SyntheticSlideSpec:
    """Parameters of the generated scene.

    Axis fractions scale with the shorter slide dimension, so the same spec
    produces comparable coverage at any size.  Nucleus radii are in level-0
    pixels; a nucleus is drawn at level l only while radius / 2^l >= 0.5.
    """

    num_blobs: int = 12
    nuclei_per_blob: int = 60
    min_axis_frac: float = 0.04
    max_axis_frac: float = 0.11
    min_nucleus_radius: float = 2.0
    max_nucleus_radius: float = 6.0
    margin_frac: float = 0.08

    def __post_init__(self):
        if self.num_blobs < 0 or self.nuclei_per_blob < 0:
            raise ValueError("counts must be >= 0")
        if not 0 < self.min_axis_frac <= self.max_axis_frac:
            raise ValueError("axis fractions must satisfy 0 < min <= max")
        if not 0 < self.min_nucleus_radius <= self.max_nucleus_radius:
            raise ValueError("nucleus radii must satisfy 0 < min <= max")
        if not 0 <= self.margin_frac < 0.5:
            raise ValueError("margin_frac must be in [0, 0.5)")


DEFAULT_SLIDE_SPEC = SyntheticSlideSpec()


class _Scene:
    """Seeded geometry: blob ellipses, nucleus disks, and their colors."""

    def __init__(self, seed: int, width: int, height: int,
                 spec: SyntheticSlideSpec):
        rng = np.random.default_rng(seed)
        n, k = spec.num_blobs, spec.nuclei_per_blob
        short = min(width, height)
        m = spec.margin_frac
        self.cx = rng.uniform(m * width, (1 - m) * width, n)
        self.cy = rng.uniform(m * height, (1 - m) * height, n)
        self.a = rng.uniform(spec.min_axis_frac, spec.max_axis_frac, n) * short
        self.b = self.a * rng.uniform(0.45, 0.95, n)
        theta = rng.uniform(0.0, math.pi, n)
        self.cos_t = np.cos(theta)
        self.sin_t = np.sin(theta)
        self.blob_color = np.stack(
            [rng.integers(180, 226, n), rng.integers(140, 186, n),
             rng.integers(170, 216, n)], axis=1,
        ).astype(np.uint8)
        # nucleus positions: uniform over a slightly shrunk copy of the
        # parent ellipse, mapped through its rotation
        phi = rng.uniform(0.0, 2.0 * math.pi, (n, k))
        t = np.sqrt(rng.uniform(0.0, 1.0, (n, k)))
        u = 0.92 * self.a[:, None] * t * np.cos(phi)
        v = 0.92 * self.b[:, None] * t * np.sin(phi)
        self.nx = self.cx[:, None] + u * self.cos_t[:, None] - v * self.sin_t[:, None]
        self.ny = self.cy[:, None] + u * self.sin_t[:, None] + v * self.cos_t[:, None]
        self.nr = rng.uniform(spec.min_nucleus_radius,
                              spec.max_nucleus_radius, (n, k))
        self.nucleus_color = np.stack(
            [rng.integers(30, 71, (n, k)), rng.integers(20, 61, (n, k)),
             rng.integers(40, 91, (n, k))], axis=2,
        ).astype(np.uint8)
        # axis-aligned half-extents of each rotated ellipse
        self.ext_x = np.sqrt((self.a * self.cos_t) ** 2
                             + (self.b * self.sin_t) ** 2)
        self.ext_y = np.sqrt((self.a * self.sin_t) ** 2
                             + (self.b * self.cos_t) ** 2)

    def render(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Render one region.  Pixel (i, j) samples the scene at level-0
        point ((x + i) * 2^level, (y + j) * 2^level)."""
        scale = 1 << level
        out = np.full((h, w, 3), 255, dtype=np.uint8)
        px = (x + np.arange(w, dtype=np.float64)) * scale
        py = (y + np.arange(h, dtype=np.float64)) * scale
        for i in range(len(self.cx)):
            self._paint_ellipse(out, px, py, i)
        visible = self.nr / scale >= 0.5
        for i, j in zip(*np.nonzero(visible)):
            self._paint_disk(out, px, py, i, j)
        return out

    def _clip(self, px, py, x0, x1, y0, y1):
        ix = np.nonzero((px >= x0) & (px <= x1))[0]
        iy = np.nonzero((py >= y0) & (py <= y1))[0]
        if len(ix) == 0 or len(iy) == 0:
            return None
        return ix[0], ix[-1] + 1, iy[0], iy[-1] + 1

    def _paint_ellipse(self, out, px, py, i):
        span = self._clip(px, py,
                          self.cx[i] - self.ext_x[i], self.cx[i] + self.ext_x[i],
                          self.cy[i] - self.ext_y[i], self.cy[i] + self.ext_y[i])
        if span is None:
            return
        cx0, cx1, cy0, cy1 = span
        dx = px[cx0:cx1][None, :] - self.cx[i]
        dy = py[cy0:cy1][:, None] - self.cy[i]
        u = dx * self.cos_t[i] + dy * self.sin_t[i]
        v = -dx * self.sin_t[i] + dy * self.cos_t[i]
        inside = (u / self.a[i]) ** 2 + (v / self.b[i]) ** 2 <= 1.0
        out[cy0:cy1, cx0:cx1][inside] = self.blob_color[i]

    def _paint_disk(self, out, px, py, i, j):
        cx, cy, r = self.nx[i, j], self.ny[i, j], self.nr[i, j]
        span = self._clip(px, py, cx - r, cx + r, cy - r, cy + r)
        if span is None:
            return
        cx0, cx1, cy0, cy1 = span
        dx = px[cx0:cx1][None, :] - cx
        dy = py[cy0:cy1][:, None] - cy
        inside = dx * dx + dy * dy <= r * r
        out[cy0:cy1, cx0:cx1][inside] = self.nucleus_color[i, j]


class SyntheticPyramid(ImagePyramid):
    """Read-only pyramid that renders the scene on demand.

    Levels follow the standard plan but hold no pixels, so arbitrarily large
    virtual slides open instantly and cost memory only for regions actually
    read.
    """

    def __init__(self, seed: int, width: int, height: int,
                 spec: SyntheticSlideSpec = DEFAULT_SLIDE_SPEC,
                 policy: PyramidPolicy = DEFAULT_POLICY,
                 base_magnification: float = 40.0):
        dims = plan_levels(width, height, policy)
        super().__init__(width, height, 3, dims,
                         [STORAGE_PROCEDURAL] * len(dims),
                         policy.tile_size, base_magnification)
        self.seed = seed
        self.spec = spec
        self._scene = _Scene(seed, width, height, spec)

    def read_region(self, level, x, y, w, h):
        self._check_region(level, x, y, w, h)
        return self._scene.render(level, x, y, w, h)


def generate_synthetic_slide(
    seed: int,
    width: int,
    height: int,
    spec: SyntheticSlideSpec = DEFAULT_SLIDE_SPEC,
    policy: PyramidPolicy = DEFAULT_POLICY,
    base_magnification: float = 40.0,
) -> ArrayPyramid:
    """Materialize a synthetic slide into a writable pyramid.

    Bit-identical to reading the same regions from a
    :class:`SyntheticPyramid` with the same arguments.
    """
    scene = _Scene(seed, width, height, spec)
    p = create_pyramid(width, height, 3, policy, base_magnification)
    for level in range(p.num_levels):
        lw, lh = p.level_size(level)
        # render in horizontal bands to bound the temporary footprint
        band = max(1, (1 << 24) // (lw * 3))
        for y0 in range(0, lh, band):
            bh = min(band, lh - y0)
            p.write_region(level, 0, y0, scene.render(level, 0, y0, lw, bh))
    return p
