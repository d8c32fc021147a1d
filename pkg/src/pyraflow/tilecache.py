"""Byte-budgeted tile cache with queue eviction and coarse-level fallback.

Decoded tiles sit in a queue; using a tile moves it to the back, and loads
evict from the front until the cache fits its byte budget.  Tiles of the
lowest-resolution level are pinned outside the budget so some representation
of every slide position is always resident.  When a requested tile is not
resident, :meth:`TileCache.resolve_with_fallback` serves an upscaled crop of
the nearest resident ancestor and schedules the true tile for loading.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .pyramid import ImagePyramid, Tile, TileKey

DEFAULT_CACHE_BYTES = 256 * 2**20


class CacheConfigError(ValueError):
    """Budget cannot hold even one full tile."""


@dataclass(frozen=True)
class Viewport:
    """A view over level-0 coordinates mapped onto an output raster."""

    center_x: float
    center_y: float
    view_width_l0: float
    out_width_px: int
    out_height_px: int

    def __post_init__(self):
        if (self.view_width_l0 <= 0 or self.out_width_px <= 0
                or self.out_height_px <= 0):
            raise ValueError("viewport extents must be positive")

    @property
    def view_height_l0(self) -> float:
        return self.view_width_l0 * self.out_height_px / self.out_width_px


@dataclass(frozen=True)
class CacheStats:
    hits: int
    misses: int
    evictions: int
    resident_bytes: int
    pinned_bytes: int
    pinned_count: int


def select_level(v: Viewport, num_levels: int) -> int:
    """Coarsest level whose pixel density still meets the output's.

    ``floor(log2(view_width_l0 / out_width_px))`` clamped to the level range.
    """
    ratio = v.view_width_l0 / v.out_width_px
    return max(0, min(num_levels - 1, math.floor(math.log2(ratio))))


def tiles_for_viewport(p: ImagePyramid, v: Viewport) -> list[TileKey]:
    """Keys of the selected level's tiles intersecting the view, row-major."""
    level = select_level(v, p.num_levels)
    scale = 1 << level
    x0 = (v.center_x - v.view_width_l0 / 2) / scale
    x1 = (v.center_x + v.view_width_l0 / 2) / scale
    y0 = (v.center_y - v.view_height_l0 / 2) / scale
    y1 = (v.center_y + v.view_height_l0 / 2) / scale
    ts = p.tile_size
    col0 = max(0, min(p.tile_cols(level) - 1, math.floor(x0 / ts)))
    col1 = max(0, min(p.tile_cols(level) - 1, math.ceil(x1 / ts) - 1))
    row0 = max(0, min(p.tile_rows(level) - 1, math.floor(y0 / ts)))
    row1 = max(0, min(p.tile_rows(level) - 1, math.ceil(y1 / ts) - 1))
    return [
        TileKey(level, col, row)
        for row in range(row0, row1 + 1)
        for col in range(col0, col1 + 1)
    ]


def upscale_crop(ancestor: Tile, key: TileKey, bounds: tuple[int, int, int, int],
                 tile_size: int) -> Tile:
    """Stand-in pixels for ``key`` cut from a coarser ancestor tile.

    Nearest-neighbor: output pixel i maps to ancestor-level pixel
    ``(col * tile_size + i) >> d``.  The mapped range never leaves the
    ancestor tile, because the requested tile's span divided by 2^d lies
    inside the ancestor's span.
    """
    d = ancestor.key.level - key.level
    if d <= 0:
        raise ValueError("ancestor must be a coarser level")
    x, y, w, h = bounds
    src_x = ((x + np.arange(w)) >> d) - ancestor.key.col * tile_size
    src_y = ((y + np.arange(h)) >> d) - ancestor.key.row * tile_size
    return Tile(key, ancestor.pixels[src_y[:, None], src_x[None, :]])


class TileCache:
    """Queue cache over one pyramid.  Thread-safe; misses for the same key
    coalesce into a single load."""

    def __init__(self, pyramid: ImagePyramid, max_bytes: int = DEFAULT_CACHE_BYTES):
        full_tile = pyramid.tile_size * pyramid.tile_size * pyramid.channels
        if max_bytes < full_tile:
            raise CacheConfigError(
                f"budget {max_bytes} B cannot hold one {full_tile} B tile"
            )
        self.pyramid = pyramid
        self.max_bytes = max_bytes
        self._lock = threading.Lock()
        self._queue: OrderedDict[TileKey, Tile] = OrderedDict()
        self._pinned: dict[TileKey, Tile] = {}
        self._inflight: dict[TileKey, threading.Event] = {}
        self._pending: OrderedDict[TileKey, None] = OrderedDict()
        self._resident_bytes = 0
        self._pinned_bytes = 0
        self._hits = 0
        self._misses = 0
        self.eviction_log: list[TileKey] = []

    # -- core ---------------------------------------------------------------

    def get_tile(self, key: TileKey) -> Tile:
        """Fetch a tile, loading and evicting as needed."""
        self.pyramid.validate_key(key)
        while True:
            with self._lock:
                tile = self._lookup(key)
                if tile is not None:
                    self._hits += 1
                    return tile
                waiter = self._inflight.get(key)
                if waiter is None:
                    self._inflight[key] = done = threading.Event()
                    break
            waiter.wait()
        try:
            tile = self.pyramid.read_tile(key)
        except BaseException:
            with self._lock:
                del self._inflight[key]
            done.set()
            raise
        with self._lock:
            self._misses += 1
            self._insert(key, tile)
            del self._inflight[key]
        done.set()
        return tile

    def _lookup(self, key: TileKey) -> Tile | None:
        """Resident tile for ``key``, refreshed in the queue; else None.
        Caller holds the lock."""
        if key.level == self.pyramid.lowest_level:
            return self._pinned.get(key)
        tile = self._queue.get(key)
        if tile is not None:
            self._queue.move_to_end(key)
        return tile

    def _insert(self, key: TileKey, tile: Tile) -> None:
        if key.level == self.pyramid.lowest_level:
            if key not in self._pinned:
                self._pinned[key] = tile
                self._pinned_bytes += tile.byte_size
            return
        if key in self._queue:
            return
        self._queue[key] = tile
        self._resident_bytes += tile.byte_size
        while self._resident_bytes > self.max_bytes:
            evicted_key, evicted = self._queue.popitem(last=False)
            self._resident_bytes -= evicted.byte_size
            self.eviction_log.append(evicted_key)

    # -- fallback -----------------------------------------------------------

    def resolve_with_fallback(self, key: TileKey) -> tuple[Tile, int]:
        """Best resident representation of ``key`` without blocking on loads.

        Returns the tile itself when resident.  Otherwise the missing tile
        joins the pending-load list and the nearest resident coarser
        ancestor is cropped and upscaled to stand in; the lowest level is
        loaded (and pinned) on the spot if nothing else is resident, so a
        result always exists.
        """
        self.pyramid.validate_key(key)
        lowest = self.pyramid.lowest_level
        with self._lock:
            tile = self._lookup(key)
            if tile is not None:
                self._hits += 1
                return tile, key.level
            if key.level != lowest:
                self._pending.setdefault(key, None)
        bounds = self.pyramid.tile_bounds(key)
        with self._lock:
            for level in range(key.level + 1, lowest):
                d = level - key.level
                ancestor = self._lookup(
                    TileKey(level, key.col >> d, key.row >> d))
                if ancestor is not None:
                    self._hits += 1
                    return (
                        upscale_crop(ancestor, key, bounds,
                                     self.pyramid.tile_size),
                        level,
                    )
        d = lowest - key.level
        anchor = self.get_tile(TileKey(lowest, key.col >> d, key.row >> d))
        if key.level == lowest:
            return anchor, lowest
        return upscale_crop(anchor, key, bounds, self.pyramid.tile_size), lowest

    def process_pending(self, limit: int | None = None) -> int:
        """Load queued fallback misses (oldest first); returns loads done."""
        loaded = 0
        while limit is None or loaded < limit:
            with self._lock:
                if not self._pending:
                    break
                key, _ = self._pending.popitem(last=False)
                if self._lookup(key) is not None:
                    continue
            self.get_tile(key)
            loaded += 1
        return loaded

    # -- viewport helpers ---------------------------------------------------

    def select_level(self, v: Viewport) -> int:
        return select_level(v, self.pyramid.num_levels)

    def tiles_for_viewport(self, v: Viewport) -> list[TileKey]:
        return tiles_for_viewport(self.pyramid, v)

    def preload_lowest_level(self) -> None:
        """Pin every tile of the lowest-resolution level."""
        p = self.pyramid
        lowest = p.lowest_level
        for row in range(p.tile_rows(lowest)):
            for col in range(p.tile_cols(lowest)):
                self.get_tile(TileKey(lowest, col, row))

    # -- introspection ------------------------------------------------------

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    def queue_keys(self) -> list[TileKey]:
        """Snapshot of the eviction queue, front (next victim) first."""
        with self._lock:
            return list(self._queue)

    def pending_keys(self) -> list[TileKey]:
        with self._lock:
            return list(self._pending)

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(self._hits, self._misses,
                              len(self.eviction_log), self._resident_bytes,
                              self._pinned_bytes, len(self._pinned))
