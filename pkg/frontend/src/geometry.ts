import type { Rect, SlideManifest, TileKey } from "./types.js";

/** Width or height of pyramid level `level` given the base extent. */
export const levelExtent = (base: number, level: number): number =>
  Math.ceil(base / 2 ** level);

/** Tiles along one axis of a level. */
export const tilesAcross = (extent: number, tileSize: number): number =>
  Math.ceil(extent / tileSize);

/**
 * Pyramid level to render at for a given zoom, where zoom is level-0
 * pixels per screen pixel. Mirrors the server's choice: the level whose
 * downsample factor is the floor power of two, clamped to real levels.
 */
export function levelForZoom(zoom: number, numLevels: number): number {
  if (zoom <= 0) throw new Error("zoom must be positive");
  const raw = Math.floor(Math.log2(zoom));
  return Math.min(Math.max(raw, 0), numLevels - 1);
}

/** Viewport rectangle in level-0 pixels mapped into `level` pixels. */
export function viewportAtLevel(view: Rect, level: number): Rect {
  const scale = 2 ** level;
  return {
    x: view.x / scale,
    y: view.y / scale,
    w: view.w / scale,
    h: view.h / scale,
  };
}

/**
 * Tile keys covering a level-space viewport, clamped to the grid and
 * listed row-major (rows outer, columns inner).
 */
export function tilesForViewport(
  view: Rect,
  level: number,
  tileSize: number,
  gridCols: number,
  gridRows: number,
): TileKey[] {
  const firstCol = Math.max(0, Math.floor(view.x / tileSize));
  const firstRow = Math.max(0, Math.floor(view.y / tileSize));
  const lastCol = Math.min(gridCols - 1,
                           Math.floor((view.x + view.w - 1) / tileSize));
  const lastRow = Math.min(gridRows - 1,
                           Math.floor((view.y + view.h - 1) / tileSize));
  const keys: TileKey[] = [];
  for (let row = firstRow; row <= lastRow; row += 1) {
    for (let col = firstCol; col <= lastCol; col += 1) {
      keys.push({ level, col, row });
    }
  }
  return keys;
}

/** Tile grid dimensions of a slide level. */
export function gridFor(
  manifest: SlideManifest,
  level: number,
): { cols: number; rows: number } {
  return {
    cols: tilesAcross(levelExtent(manifest.width, level), manifest.tile_size),
    rows: tilesAcross(levelExtent(manifest.height, level), manifest.tile_size),
  };
}

export const rectsIntersect = (a: Rect, b: Rect): boolean =>
  a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;

/** Keep the viewport center inside the slide and the zoom positive. */
export function clampView(
  view: Rect,
  slideWidth: number,
  slideHeight: number,
): Rect {
  const x = Math.min(Math.max(view.x, -view.w / 2), slideWidth - view.w / 2);
  const y = Math.min(Math.max(view.y, -view.h / 2), slideHeight - view.h / 2);
  return { x, y, w: view.w, h: view.h };
}
