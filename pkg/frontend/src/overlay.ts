import { rectsIntersect, tilesForViewport } from "./geometry.js";
import { tileKeyId, type Rect, type TileKey } from "./types.js";

export const UNPROCESSED = 255;

export interface ClassStyle {
  color: [number, number, number];
  opacity: number; // 0..1
  confidenceScalesOpacity: boolean;
}

export type OverlayStyle = Map<number, ClassStyle>;

export const DEFAULT_COLORS: [number, number, number][] = [
  [46, 204, 64],
  [255, 65, 54],
  [0, 116, 217],
  [255, 220, 0],
  [177, 13, 201],
  [57, 204, 204],
  [255, 133, 27],
  [1, 255, 112],
];

export function defaultStyle(numClasses: number): OverlayStyle {
  const style: OverlayStyle = new Map();
  for (let c = 0; c < numClasses; c += 1) {
    style.set(c, {
      color: DEFAULT_COLORS[c % DEFAULT_COLORS.length],
      opacity: 0.5,
      confidenceScalesOpacity: true,
    });
  }
  return style;
}

/** A decoded overlay raster: per-pixel class byte and confidence byte. */
export interface OverlayCells {
  width: number;
  height: number;
  classes: Uint8Array;
  confidence: Uint8Array;
}

/**
 * Colorize decoded overlay cells into an RGBA buffer. Pure: style edits
 * re-run this without touching the network. Class 255 stays fully
 * transparent regardless of style.
 */
export function colorize(
  cells: OverlayCells,
  style: OverlayStyle,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(cells.width * cells.height * 4);
  for (let i = 0; i < cells.classes.length; i += 1) {
    const cls = cells.classes[i];
    if (cls === UNPROCESSED) continue; // alpha stays 0
    const entry = style.get(cls);
    if (entry === undefined || entry.opacity <= 0) continue;
    const scale = entry.confidenceScalesOpacity
      ? cells.confidence[i] / 255
      : 1;
    out[i * 4] = entry.color[0];
    out[i * 4 + 1] = entry.color[1];
    out[i * 4 + 2] = entry.color[2];
    out[i * 4 + 3] = Math.round(entry.opacity * scale * 255);
  }
  return out;
}

export interface OverlayGeometry {
  /** Pixels per overlay-raster cell along x/y, in run-level pixels. */
  cellWidth: number;
  cellHeight: number;
  tileSize: number;
  gridCols: number;
  gridRows: number;
}

/** Heatmaps are served as one raster cell grid at key 0/0/0. */
export function heatmapGeometry(gridCols: number, gridRows: number,
                                patchSize: number): OverlayGeometry {
  return {
    cellWidth: patchSize,
    cellHeight: patchSize,
    tileSize: Math.max(gridCols, gridRows),
    gridCols: 1,
    gridRows: 1,
  };
}

/** Segmentation rasters are tiled at the result tile size. */
export function segmentationGeometry(levelWidth: number, levelHeight: number,
                                     tileSize: number): OverlayGeometry {
  return {
    cellWidth: 1,
    cellHeight: 1,
    tileSize,
    gridCols: Math.ceil(levelWidth / tileSize),
    gridRows: Math.ceil(levelHeight / tileSize),
  };
}

/**
 * Cache of fetched overlay tiles with region-driven invalidation. The
 * fetcher is injected; restyling never goes through it.
 */
export class OverlayStore {
  private tiles = new Map<string, OverlayCells>();
  fetches: string[] = [];

  constructor(
    private readonly geometry: OverlayGeometry,
    private readonly fetchTile: (key: TileKey) => Promise<OverlayCells>,
  ) {}

  /** Overlay tile keys whose pixels intersect a run-level region. */
  keysForRegion(region: Rect): TileKey[] {
    const raster: Rect = {
      x: region.x / this.geometry.cellWidth,
      y: region.y / this.geometry.cellHeight,
      w: region.w / this.geometry.cellWidth,
      h: region.h / this.geometry.cellHeight,
    };
    return tilesForViewport(raster, 0, this.geometry.tileSize,
                            this.geometry.gridCols, this.geometry.gridRows)
      .filter((key) => rectsIntersect(raster, this.tileRect(key)));
  }

  private tileRect(key: TileKey): Rect {
    const size = this.geometry.tileSize;
    return { x: key.col * size, y: key.row * size, w: size, h: size };
  }

  get(key: TileKey): OverlayCells | undefined {
    return this.tiles.get(tileKeyId(key));
  }

  entries(): IterableIterator<[string, OverlayCells]> {
    return this.tiles.entries();
  }

  geometryInfo(): OverlayGeometry {
    return this.geometry;
  }

  async refresh(key: TileKey): Promise<OverlayCells> {
    this.fetches.push(tileKeyId(key));
    const cells = await this.fetchTile(key);
    this.tiles.set(tileKeyId(key), cells);
    return cells;
  }

  /** Refetch exactly the tiles a committed region touches. */
  async invalidate(region: Rect): Promise<TileKey[]> {
    const keys = this.keysForRegion(region);
    await Promise.all(keys.map((key) => this.refresh(key)));
    return keys;
  }

  clear(): void {
    this.tiles.clear();
  }
}
