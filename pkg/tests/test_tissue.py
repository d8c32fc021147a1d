import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pyraflow.pyramid import PyramidPolicy
from pyraflow.synthetic import SyntheticPyramid
from pyraflow.tissue import (
    TissueParams,
    closing,
    color_distance,
    mask_from_pixels,
    otsu_threshold,
    preview_tissue,
    segment_tissue,
)

SMALL = PyramidPolicy(min_level_extent=128, tile_size=64)


def test_color_distance_fixtures():
    assert color_distance((255, 255, 255)) == 0.0
    assert color_distance((0, 0, 0)) == pytest.approx(math.sqrt(3 * 255 ** 2))
    assert color_distance((200, 180, 190)) == pytest.approx(math.sqrt(12875))
    arr = np.array([[[255, 255, 255], [255, 225, 255]]], dtype=np.uint8)
    assert color_distance(arr).tolist() == [[0.0, 30.0]]


def test_threshold_is_inclusive():
    params = TissueParams(threshold=30.0, closing_radius=0)
    exactly_30 = np.array([[[255, 225, 255]]], dtype=np.uint8)
    just_under = np.array([[[255, 226, 255]]], dtype=np.uint8)
    assert mask_from_pixels(exactly_30, params)[0, 0] == 1
    assert mask_from_pixels(just_under, params)[0, 0] == 0


def test_closing_fills_pinhole_but_keeps_background():
    mask = np.ones((9, 9), dtype=np.uint8)
    mask[4, 4] = 0
    assert closing(mask, 1)[4, 4] == 1
    assert (closing(np.zeros((9, 9), dtype=np.uint8), 2) == 0).all()
    assert (closing(np.ones((9, 9), dtype=np.uint8), 2) == 1).all()


def test_closing_radius_zero_is_identity_copy():
    mask = (np.arange(25).reshape(5, 5) % 3 == 0).astype(np.uint8)
    out = closing(mask, 0)
    assert (out == mask).all()
    out[0, 0] ^= 1
    assert out[0, 0] != mask[0, 0]


def test_closing_does_not_bridge_distant_components():
    # Two tissue pixels 7 apart stay separate under radius 2.
    mask = np.zeros((5, 11), dtype=np.uint8)
    mask[2, 1] = mask[2, 9] = 1
    closed = closing(mask, 2)
    assert (closed == oracles.closing_reference(mask, 2)).all()
    assert closed[2, 5] == 0


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40), st.integers(1, 40),
       st.integers(0, 3))
def test_closing_matches_shift_stack_reference(seed, h, w, radius):
    mask = (np.random.default_rng(seed).random((h, w)) < 0.35).astype(np.uint8)
    assert (closing(mask, radius)
            == oracles.closing_reference(mask, radius)).all()


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 24), st.integers(1, 24),
       st.floats(0.0, 441.0))
def test_mask_matches_per_pixel_reference(seed, h, w, threshold):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    params = TissueParams(threshold=threshold, closing_radius=1)
    expected = oracles.tissue_mask_reference(pixels, threshold, 1)
    assert (mask_from_pixels(pixels, params) == expected).all()


def test_segment_tissue_runs_on_lowest_level():
    p = SyntheticPyramid(42, 600, 400, policy=SMALL)
    mask = segment_tissue(p)
    w, h = p.level_size(p.lowest_level)
    assert mask.shape == (h, w)
    assert mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 1}
    fraction = mask.mean()
    assert 0.0 < fraction < 1.0


def test_segment_tissue_rejects_grayscale():
    from pyraflow.pyramid import create_pyramid
    p = create_pyramid(100, 100, 1, SMALL)
    try:
        with pytest.raises(TypeError):
            segment_tissue(p)
    finally:
        p.close()


def test_preview_matches_strided_segmentation():
    p = SyntheticPyramid(42, 600, 400, policy=SMALL)
    params = TissueParams()
    lowest = p.lowest_level
    w, h = p.level_size(lowest)
    region = p.read_region(lowest, 0, 0, w, h)
    for ds in (1, 2, 4):
        expected = mask_from_pixels(region[::ds, ::ds], params)
        assert (preview_tissue(p, params, ds) == expected).all()
    with pytest.raises(ValueError):
        preview_tissue(p, params, 0)


def test_params_validation():
    for bad in (dict(threshold=-1.0), dict(threshold=442.0),
                dict(closing_radius=-1), dict(reference_color=(256, 0, 0)),
                dict(reference_color=(1, 2))):
        with pytest.raises(ValueError):
            TissueParams(**bad)


# -- Otsu -------------------------------------------------------------------


def test_otsu_bimodal_fixture():
    hist = np.zeros(256, dtype=np.int64)
    hist[50] = 10
    hist[200] = 10
    assert otsu_threshold(hist) == 50


def test_otsu_single_value_histogram():
    hist = np.zeros(256, dtype=np.int64)
    hist[77] = 123
    # Every split scores zero variance; the first valid threshold wins.
    assert otsu_threshold(hist) == 77


def test_otsu_tie_breaks_to_smallest_threshold():
    hist = np.zeros(256, dtype=np.int64)
    hist[10] = 5
    hist[11] = 5
    hist[200] = 5
    hist[201] = 5
    assert otsu_threshold(hist) == oracles.otsu_reference(hist)


def test_otsu_input_validation():
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(255, dtype=np.int64))
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(256, dtype=np.int64))
    bad = np.zeros(256, dtype=np.int64)
    bad[3] = -1
    with pytest.raises(ValueError):
        otsu_threshold(bad)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60)
def test_otsu_matches_exhaustive_reference(seed):
    rng = np.random.default_rng(seed)
    hist = np.zeros(256, dtype=np.int64)
    occupied = rng.integers(0, 256, size=rng.integers(1, 40))
    hist[occupied] = rng.integers(1, 1000, size=len(occupied))
    assert otsu_threshold(hist) == oracles.otsu_reference(hist)


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 255))
def test_otsu_shift_invariance_on_two_spikes(seed, lo):
    rng = np.random.default_rng(seed)
    hi = int(rng.integers(lo, 256))
    hist = np.zeros(256, dtype=np.int64)
    hist[lo] += int(rng.integers(1, 100))
    hist[hi] += int(rng.integers(1, 100))
    t = otsu_threshold(hist)
    assert lo <= t <= hi
    if lo != hi:
        assert t < hi  # the split separates the spikes
