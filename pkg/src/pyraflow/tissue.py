"""Tissue-vs-glass segmentation on the lowest-resolution level.

A pixel is tissue when its Euclidean RGB distance from a reference color
(default pure white) reaches a threshold; morphological closing with a
square structuring element then fills pinholes.  Otsu's method is available
as an alternative way to pick the threshold from a gray histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .pyramid import ImagePyramid

MAX_DISTANCE = 441.68  # sqrt(3 * 255^2), rounded up


@dataclass(frozen=True)
class TissueParams:
    threshold: float = 30.0
    closing_radius: int = 2
    reference_color: tuple[int, int, int] = (255, 255, 255)

    def __post_init__(self):
        if not 0 <= self.threshold <= MAX_DISTANCE:
            raise ValueError(f"threshold must be in [0, {MAX_DISTANCE}]")
        if self.closing_radius < 0 or self.closing_radius != int(self.closing_radius):
            raise ValueError("closing_radius must be a non-negative integer")
        if len(self.reference_color) != 3 or not all(
                0 <= c <= 255 for c in self.reference_color):
            raise ValueError("reference_color must be an RGB triplet in [0, 255]")


def color_distance(pixels, reference_color=(255, 255, 255)):
    """Euclidean distance from ``reference_color`` per pixel.

    Accepts one RGB triplet or an (..., 3) array; returns float64.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    ref = np.asarray(reference_color, dtype=np.float64)
    return np.sqrt(np.sum((ref - arr) ** 2, axis=-1))


def closing(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary closing (dilation then erosion) with a square of side
    2 * radius + 1, treating everything beyond the mask as background.

    Padding by ``radius`` before dilating makes the crop independent of the
    filters' own border handling: every value the kept region depends on is
    computed inside the padded frame.
    """
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    padded = np.pad(mask, radius)
    dilated = ndimage.maximum_filter(padded, size=size, mode="constant", cval=0)
    eroded = ndimage.minimum_filter(dilated, size=size, mode="constant", cval=0)
    return eroded[radius:-radius, radius:-radius]


def segment_tissue(p: ImagePyramid, params: TissueParams = TissueParams()) -> np.ndarray:
    """Binary tissue mask (1 = tissue) over the lowest-resolution level."""
    if p.channels != 3:
        raise TypeError("tissue segmentation needs a 3-channel pyramid")
    lowest = p.lowest_level
    w, h = p.level_size(lowest)
    region = p.read_region(lowest, 0, 0, w, h)
    return mask_from_pixels(region, params)


def mask_from_pixels(pixels: np.ndarray, params: TissueParams) -> np.ndarray:
    distance = color_distance(pixels, params.reference_color)
    mask = (distance >= params.threshold).astype(np.uint8)
    return closing(mask, params.closing_radius)


def preview_tissue(p: ImagePyramid, params: TissueParams,
                   downsample: int = 1) -> np.ndarray:
    """Same segmentation on a ``downsample``-strided copy of the lowest
    level; trades resolution for interactive latency."""
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    if p.channels != 3:
        raise TypeError("tissue segmentation needs a 3-channel pyramid")
    lowest = p.lowest_level
    w, h = p.level_size(lowest)
    region = p.read_region(lowest, 0, 0, w, h)
    return mask_from_pixels(region[::downsample, ::downsample], params)


def otsu_threshold(gray_histogram) -> int:
    """Threshold in [0, 255] maximizing between-class variance.

    Pixels with value <= t form class 0.  Thresholds leaving class 0 empty
    are skipped; an empty class 1 scores variance 0; ties go to the
    smallest t.
    """
    hist = np.asarray(gray_histogram)
    if hist.shape != (256,):
        raise ValueError("histogram must have exactly 256 bins")
    if np.any(hist < 0):
        raise ValueError("histogram counts must be >= 0")
    counts = [int(c) for c in hist]
    total = sum(counts)
    if total == 0:
        raise ValueError("histogram is empty")
    weighted_total = sum(i * c for i, c in enumerate(counts))
    best_t = -1
    best_sigma = -1.0
    w0 = 0
    sum0 = 0
    for t in range(256):
        w0 += counts[t]
        sum0 += t * counts[t]
        if w0 == 0:
            continue
        w1 = total - w0
        if w1 == 0:
            sigma = 0.0
        else:
            mu0 = sum0 / w0
            mu1 = (weighted_total - sum0) / w1
            sigma = w0 * w1 * (mu0 - mu1) ** 2
        if sigma > best_sigma:
            best_sigma = sigma
            best_t = t
    return best_t
