"""Tiled image pyramids.

A pyramid holds a base raster (level 0) plus halved copies down to a
configurable floor.  Levels of a freshly created pyramid live either in RAM
or in a file-backed memory map, decided per level by a byte threshold.
Pyramids can also be opened from an on-disk container: a directory with a
``manifest.json`` and one losslessly compressed PNG per tile.
"""

from __future__ import annotations

import json
import math
import shutil
import tempfile
import threading
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

STORAGE_RAM = "ram"
STORAGE_FILE_MAPPED = "file_mapped"
STORAGE_CONTAINER = "container"
STORAGE_PROCEDURAL = "procedural"


class PyramidError(Exception):
    """Base error for pyramid construction and I/O."""


class RegionBoundsError(PyramidError):
    """Requested region falls outside a level."""


class ContainerError(PyramidError):
    """Container directory is missing, malformed, or inconsistent."""


class ReadOnlyPyramidError(PyramidError):
    """Write attempted on a pyramid that does not support writes."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class TileKey(NamedTuple):
    level: int
    col: int
    row: int


@dataclass
class Tile:
    """A decoded pixel block; the unit of caching and serving."""

    key: TileKey
    pixels: np.ndarray  # (h, w, c) uint8, row-major, channels interleaved

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def byte_size(self) -> int:
        return self.pixels.nbytes


@dataclass(frozen=True)
class PyramidPolicy:
    """Creation policy: when to stop halving and when to leave RAM."""

    memory_map_threshold_bytes: int = 512 * 2**20
    min_level_extent: int = 4096
    tile_size: int = 256

    def __post_init__(self):
        if self.memory_map_threshold_bytes <= 0:
            raise ValueError("memory_map_threshold_bytes must be positive")
        if self.min_level_extent <= 0:
            raise ValueError("min_level_extent must be positive")
        if self.tile_size <= 0 or self.tile_size & (self.tile_size - 1):
            raise ValueError("tile_size must be a positive power of two")


DEFAULT_POLICY = PyramidPolicy()


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    width: int
    height: int
    storage: str
    byte_size: int


def plan_levels(
    width: int, height: int, policy: PyramidPolicy = DEFAULT_POLICY
) -> list[tuple[int, int]]:
    """Level dimensions for a ``width x height`` base image.

    Level ``l`` measures ``ceil(width / 2^l) x ceil(height / 2^l)``.  Halving
    stops before the first level where both dimensions drop below
    ``policy.min_level_extent``; level 0 always exists.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    dims = [(width, height)]
    level = 1
    while True:
        w = _ceil_div(width, 1 << level)
        h = _ceil_div(height, 1 << level)
        if w < policy.min_level_extent and h < policy.min_level_extent:
            break
        dims.append((w, h))
        level += 1
    return dims


class ImagePyramid:
    """Multi-level tiled raster.  Concrete subclasses provide the pixels.

    Concurrent reads are safe.  Writes to disjoint regions may proceed
    concurrently; overlapping concurrent writes are a caller error.
    """

    def __init__(
        self,
        width: int,
        height: int,
        channels: int,
        level_dims: list[tuple[int, int]],
        storages: list[str],
        tile_size: int,
        base_magnification: float,
    ):
        if channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.width = width
        self.height = height
        self.channels = channels
        self.tile_size = tile_size
        self.base_magnification = base_magnification
        self.levels = [
            PyramidLevel(i, w, h, storages[i], w * h * channels)
            for i, (w, h) in enumerate(level_dims)
        ]

    # -- geometry -----------------------------------------------------------

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def lowest_level(self) -> int:
        """Index of the lowest-resolution level."""
        return len(self.levels) - 1

    def level_size(self, level: int) -> tuple[int, int]:
        lv = self.levels[level]
        return lv.width, lv.height

    def magnification(self, level: int) -> float:
        return self.base_magnification / (1 << level)

    def tile_cols(self, level: int) -> int:
        return _ceil_div(self.levels[level].width, self.tile_size)

    def tile_rows(self, level: int) -> int:
        return _ceil_div(self.levels[level].height, self.tile_size)

    def validate_key(self, key: TileKey) -> None:
        if not 0 <= key.level < self.num_levels:
            raise RegionBoundsError(f"level {key.level} out of range")
        if not (0 <= key.col < self.tile_cols(key.level)
                and 0 <= key.row < self.tile_rows(key.level)):
            raise RegionBoundsError(
                f"tile ({key.col}, {key.row}) outside level {key.level} grid"
            )

    def tile_bounds(self, key: TileKey) -> tuple[int, int, int, int]:
        """(x, y, w, h) of a tile in its level's pixels; edge tiles shrink."""
        self.validate_key(key)
        lw, lh = self.level_size(key.level)
        x = key.col * self.tile_size
        y = key.row * self.tile_size
        return x, y, min(self.tile_size, lw - x), min(self.tile_size, lh - y)

    def _check_region(self, level: int, x: int, y: int, w: int, h: int) -> None:
        if not 0 <= level < self.num_levels:
            raise RegionBoundsError(f"level {level} out of range")
        lw, lh = self.level_size(level)
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > lw or y + h > lh:
            raise RegionBoundsError(
                f"region {w}x{h}+{x}+{y} outside level {level} ({lw}x{lh})"
            )

    # -- pixels -------------------------------------------------------------

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        raise NotImplementedError

    def write_region(self, level: int, x: int, y: int, pixels: np.ndarray) -> None:
        raise ReadOnlyPyramidError(f"{type(self).__name__} is read-only")

    def read_tile(self, key: TileKey) -> Tile:
        x, y, w, h = self.tile_bounds(key)
        return Tile(key, self.read_region(key.level, x, y, w, h))

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _coerce_pixels(pixels: np.ndarray, channels: int) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim == 2 and channels == 1:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"expected (h, w, {channels}) pixel block, got {arr.shape}")
    return arr


class ArrayPyramid(ImagePyramid):
    """Writable pyramid whose levels are numpy arrays or file-backed maps."""

    def __init__(self, width, height, channels, arrays, storages, tile_size,
                 base_magnification, backing_dir: Path | None):
        super().__init__(
            width, height, channels,
            [(a.shape[1], a.shape[0]) for a in arrays],
            storages, tile_size, base_magnification,
        )
        self._arrays = arrays
        self._backing_dir = backing_dir
        if backing_dir is not None:
            self._finalizer = weakref.finalize(self, _remove_dir, backing_dir)

    def read_region(self, level, x, y, w, h):
        self._check_region(level, x, y, w, h)
        return np.array(self._arrays[level][y:y + h, x:x + w])

    def write_region(self, level, x, y, pixels):
        arr = _coerce_pixels(pixels, self.channels)
        h, w = arr.shape[:2]
        self._check_region(level, x, y, w, h)
        self._arrays[level][y:y + h, x:x + w] = arr

    def level_array(self, level: int) -> np.ndarray:
        """Direct (mutable) view of one level; prefer the region API."""
        return self._arrays[level]

    def close(self):
        self._arrays = []
        if self._backing_dir is not None:
            self._finalizer()


def _remove_dir(path: Path) -> None:
    shutil.rmtree(path, ignore_errors=True)


def create_pyramid(
    width: int,
    height: int,
    channels: int,
    policy: PyramidPolicy = DEFAULT_POLICY,
    base_magnification: float = 40.0,
) -> ArrayPyramid:
    """Allocate a writable, zero-initialized pyramid.

    Levels whose byte size reaches ``policy.memory_map_threshold_bytes`` are
    backed by files in a temp directory (removed on close); smaller levels
    stay in RAM.
    """
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    dims = plan_levels(width, height, policy)
    arrays: list[np.ndarray] = []
    storages: list[str] = []
    backing_dir: Path | None = None
    for level, (w, h) in enumerate(dims):
        nbytes = w * h * channels
        if nbytes < policy.memory_map_threshold_bytes:
            arrays.append(np.zeros((h, w, channels), dtype=np.uint8))
            storages.append(STORAGE_RAM)
        else:
            if backing_dir is None:
                backing_dir = Path(tempfile.mkdtemp(prefix="pyraflow-levels-"))
            try:
                arr = np.memmap(
                    backing_dir / f"level_{level}.raw",
                    dtype=np.uint8, mode="w+", shape=(h, w, channels),
                )
            except OSError as exc:
                _remove_dir(backing_dir)
                raise PyramidError(
                    f"cannot allocate backing file for level {level}: {exc}"
                ) from exc
            arrays.append(arr)
            storages.append(STORAGE_FILE_MAPPED)
    return ArrayPyramid(width, height, channels, arrays, storages,
                        policy.tile_size, base_magnification, backing_dir)


# -- container format -------------------------------------------------------
#
# <dir>/manifest.json
# <dir>/level_{l}/{col}_{row}.png        8-bit, channel count per manifest,
#                                        edge tiles stored at their true size


class ContainerPyramid(ImagePyramid):
    """Read-only pyramid over a container directory; tiles decode lazily.

    ``tile_reads`` counts tile-file decodes, so tests can assert that opening
    a container stays lazy.
    """

    def __init__(self, root: Path, manifest: dict):
        levels = manifest["levels"]
        super().__init__(
            manifest["width"], manifest["height"], manifest["channels"],
            [(lv["width"], lv["height"]) for lv in levels],
            [STORAGE_CONTAINER] * len(levels),
            manifest["tile_size"], manifest["base_magnification"],
        )
        self.root = root
        self.tile_reads = 0
        self._count_lock = threading.Lock()

    def read_tile(self, key: TileKey) -> Tile:
        x, y, w, h = self.tile_bounds(key)
        path = self.root / f"level_{key.level}" / f"{key.col}_{key.row}.png"
        if not path.is_file():
            raise ContainerError(f"missing tile file: {path}")
        try:
            with Image.open(path) as im:
                arr = np.asarray(im)
        except UnidentifiedImageError as exc:
            raise ContainerError(f"undecodable tile file: {path}") from exc
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.shape != (h, w, self.channels):
            raise ContainerError(
                f"tile size mismatch at {path}: expected {h}x{w}x{self.channels}, "
                f"got {arr.shape}"
            )
        with self._count_lock:
            self.tile_reads += 1
        return Tile(key, np.ascontiguousarray(arr))

    def read_region(self, level, x, y, w, h):
        self._check_region(level, x, y, w, h)
        out = np.empty((h, w, self.channels), dtype=np.uint8)
        ts = self.tile_size
        for row in range(y // ts, (y + h - 1) // ts + 1):
            for col in range(x // ts, (x + w - 1) // ts + 1):
                tile = self.read_tile(TileKey(level, col, row))
                tx, ty = col * ts, row * ts
                sx0, sy0 = max(x, tx), max(y, ty)
                sx1 = min(x + w, tx + tile.width)
                sy1 = min(y + h, ty + tile.height)
                out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = \
                    tile.pixels[sy0 - ty:sy1 - ty, sx0 - tx:sx1 - tx]
        return out


def save_container(p: ImagePyramid, path: str | Path) -> None:
    """Write a pyramid as a container directory (lossless PNG tiles)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "width": p.width,
        "height": p.height,
        "channels": p.channels,
        "tile_size": p.tile_size,
        "base_magnification": p.base_magnification,
        "levels": [
            {
                "index": lv.index,
                "width": lv.width,
                "height": lv.height,
                "cols": p.tile_cols(lv.index),
                "rows": p.tile_rows(lv.index),
            }
            for lv in p.levels
        ],
    }
    for lv in p.levels:
        level_dir = root / f"level_{lv.index}"
        level_dir.mkdir(exist_ok=True)
        for row in range(p.tile_rows(lv.index)):
            for col in range(p.tile_cols(lv.index)):
                tile = p.read_tile(TileKey(lv.index, col, row))
                pixels = tile.pixels[:, :, 0] if p.channels == 1 else tile.pixels
                Image.fromarray(pixels).save(level_dir / f"{col}_{row}.png")
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


_REQUIRED_MANIFEST_KEYS = (
    "format_version", "width", "height", "channels", "tile_size",
    "base_magnification", "levels",
)


def open_container(path: str | Path) -> ContainerPyramid:
    """Open a container directory.  Only the manifest is read eagerly."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ContainerError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"corrupt manifest in {root}: {exc}") from exc
    for key in _REQUIRED_MANIFEST_KEYS:
        if key not in manifest:
            raise ContainerError(f"manifest missing field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ContainerError(
            f"unsupported format_version {manifest['format_version']}"
        )
    if manifest["channels"] not in (1, 3):
        raise ContainerError(f"unsupported channel count {manifest['channels']}")
    ts = manifest["tile_size"]
    if ts <= 0 or ts & (ts - 1):
        raise ContainerError(f"tile_size {ts} is not a power of two")
    levels = manifest["levels"]
    if not levels:
        raise ContainerError("manifest declares no levels")
    width, height = manifest["width"], manifest["height"]
    for l, lv in enumerate(levels):
        if lv["index"] != l:
            raise ContainerError(f"level indices not contiguous at position {l}")
        ew, eh = _ceil_div(width, 1 << l), _ceil_div(height, 1 << l)
        if (lv["width"], lv["height"]) != (ew, eh):
            raise ContainerError(
                f"level {l} is {lv['width']}x{lv['height']}, violates halving "
                f"rule (expected {ew}x{eh})"
            )
        if (lv["cols"], lv["rows"]) != (_ceil_div(ew, ts), _ceil_div(eh, ts)):
            raise ContainerError(f"level {l} tile grid does not match its size")
    return ContainerPyramid(root, manifest)


# -- flat image import ------------------------------------------------------


def box_downsample(arr: np.ndarray) -> np.ndarray:
    """Halve an (h, w, c) uint8 array by 2x2 box average, round half up.

    Odd trailing rows/columns average over the 1- or 2-pixel block that
    actually exists.
    """
    h, w = arr.shape[:2]
    oh, ow = _ceil_div(h, 2), _ceil_div(w, 2)
    sums = np.zeros((oh, ow, arr.shape[2]), dtype=np.uint32)
    counts = np.zeros((oh, ow, 1), dtype=np.uint32)
    for dy in (0, 1):
        for dx in (0, 1):
            block = arr[dy::2, dx::2]
            sums[:block.shape[0], :block.shape[1]] += block
            counts[:block.shape[0], :block.shape[1]] += 1
    # round half up: floor(s/n + 1/2) == (2s + n) // (2n)
    return ((2 * sums + counts) // (2 * counts)).astype(np.uint8)


def import_flat_image(
    path: str | Path,
    policy: PyramidPolicy = DEFAULT_POLICY,
    base_magnification: float = 40.0,
) -> ArrayPyramid:
    """Build a pyramid from a flat raster file.

    Level 0 equals the decoded source; each further level is a 2x2 box-filter
    downsample (average, round half up) of the one above.
    """
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im)[:, :, np.newaxis]
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise PyramidError(f"cannot decode image {path}: {exc}") from exc
    channels = arr.shape[2]
    p = create_pyramid(arr.shape[1], arr.shape[0], channels, policy,
                       base_magnification)
    p.write_region(0, 0, 0, arr)
    for level in range(1, p.num_levels):
        arr = box_downsample(arr)
        p.write_region(level, 0, 0, arr)
    return p
