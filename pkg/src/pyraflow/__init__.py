"""Memory-bounded reading, viewing, and sliding-window model pipelines for
gigapixel tiled image pyramids."""

from .pyramid import (
    ArrayPyramid,
    ContainerError,
    ContainerPyramid,
    ImagePyramid,
    PyramidError,
    PyramidLevel,
    PyramidPolicy,
    RegionBoundsError,
    Tile,
    TileKey,
    create_pyramid,
    import_flat_image,
    open_container,
    plan_levels,
    save_container,
)
from .synthetic import SyntheticPyramid, SyntheticSlideSpec, generate_synthetic_slide
from .tilecache import TileCache, Viewport, select_level, tiles_for_viewport
from .tissue import TissueParams, otsu_threshold, preview_tissue, segment_tissue

__version__ = "0.1.0"

__all__ = [
    "ArrayPyramid",
    "ContainerError",
    "ContainerPyramid",
    "ImagePyramid",
    "PyramidError",
    "PyramidLevel",
    "PyramidPolicy",
    "RegionBoundsError",
    "SyntheticPyramid",
    "SyntheticSlideSpec",
    "Tile",
    "TileCache",
    "TileKey",
    "TissueParams",
    "Viewport",
    "create_pyramid",
    "generate_synthetic_slide",
    "import_flat_image",
    "open_container",
    "otsu_threshold",
    "plan_levels",
    "preview_tissue",
    "save_container",
    "segment_tissue",
    "select_level",
    "tiles_for_viewport",
    "__version__",
]
