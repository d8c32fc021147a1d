import numpy as np
import pytest

from pyraflow.pyramid import (
    PyramidPolicy,
    ReadOnlyPyramidError,
    RegionBoundsError,
    TileKey,
)
from pyraflow.synthetic import (
    SyntheticPyramid,
    SyntheticSlideSpec,
    generate_synthetic_slide,
)

SMALL = PyramidPolicy(min_level_extent=128, tile_size=64)


def test_same_seed_is_deterministic():
    a = SyntheticPyramid(7, 600, 400, policy=SMALL)
    b = SyntheticPyramid(7, 600, 400, policy=SMALL)
    r1 = a.read_region(0, 100, 50, 128, 128)
    r2 = b.read_region(0, 100, 50, 128, 128)
    assert (r1 == r2).all()


def test_different_seeds_differ():
    a = SyntheticPyramid(1, 600, 400, policy=SMALL)
    b = SyntheticPyramid(2, 600, 400, policy=SMALL)
    assert (a.read_region(0, 0, 0, 600, 400)
            != b.read_region(0, 0, 0, 600, 400)).any()


def test_reads_are_windowed_consistently():
    p = SyntheticPyramid(42, 500, 300, policy=SMALL)
    whole = p.read_region(0, 0, 0, 500, 300)
    window = p.read_region(0, 123, 45, 200, 150)
    assert (window == whole[45:195, 123:323]).all()


def test_materialized_matches_procedural_all_levels():
    proc = SyntheticPyramid(42, 700, 500, policy=SMALL)
    mat = generate_synthetic_slide(42, 700, 500, policy=SMALL)
    try:
        assert mat.num_levels == proc.num_levels == 3
        for level in range(proc.num_levels):
            w, h = proc.level_size(level)
            assert (mat.read_region(level, 0, 0, w, h)
                    == proc.read_region(level, 0, 0, w, h)).all()
    finally:
        mat.close()


def test_contains_tissue_and_background(rng):
    p = SyntheticPyramid(42, 800, 600, policy=SMALL)
    region = p.read_region(0, 0, 0, 800, 600)
    white = (region == 255).all(axis=2).mean()
    assert 0.5 < white < 1.0
    # Nuclei are dark; at least a few pixels should be well below midtone.
    assert (region.mean(axis=2) < 100).sum() > 50


def test_procedural_pyramid_is_read_only():
    p = SyntheticPyramid(42, 500, 300, policy=SMALL)
    with pytest.raises(ReadOnlyPyramidError):
        p.write_region(0, 0, 0, np.zeros((4, 4, 3), dtype=np.uint8))


def test_bounds_checked():
    p = SyntheticPyramid(42, 500, 300, policy=SMALL)
    with pytest.raises(RegionBoundsError):
        p.read_region(0, 400, 0, 200, 50)


def test_huge_virtual_slide_opens_without_allocation():
    p = SyntheticPyramid(1, 200_000, 150_000)
    assert p.num_levels == 6
    assert p.level_size(5) == (6250, 4688)
    tile = p.read_tile(TileKey(5, 0, 0))
    assert tile.pixels.shape == (256, 256, 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSlideSpec(num_blobs=-1)
    with pytest.raises(ValueError):
        SyntheticSlideSpec(min_axis_frac=0.2, max_axis_frac=0.1)
    with pytest.raises(ValueError):
        SyntheticSlideSpec(min_nucleus_radius=9.0, max_nucleus_radius=3.0)
    with pytest.raises(ValueError):
        SyntheticSlideSpec(margin_frac=0.6)


def test_zero_blobs_renders_blank_slide():
    p = SyntheticPyramid(5, 300, 200, spec=SyntheticSlideSpec(num_blobs=0),
                         policy=SMALL)
    assert (p.read_region(0, 0, 0, 300, 200) == 255).all()
