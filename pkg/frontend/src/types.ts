/** Shared shapes for the server's JSON responses and event stream. */

export interface LevelInfo {
  index: number;
  width: number;
  height: number;
  magnification: number;
}

export interface SlideManifest {
  id: string;
  width: number;
  height: number;
  tile_size: number;
  base_magnification: number;
  levels: LevelInfo[];
}

export interface ModelInfo {
  name: string;
  task: string;
  num_classes: number;
  class_names: string[];
}

export interface PipelineInfo {
  name: string;
  text: string;
}

export type RunState = "running" | "finished" | "halted" | "failed";

export interface RunInfo {
  run_id: string;
  slide_id: string;
  pipeline: string;
  task: string;
  state: RunState;
  done: number;
  total: number;
  level: number;
  grid_cols: number;
  grid_rows: number;
  error?: string;
}

export type RunEvent =
  | { type: "started"; run_id: string; total: number }
  | { type: "progress"; done: number; total: number }
  | { type: "region"; level: number; x: number; y: number; w: number; h: number }
  | { type: "finished" }
  | { type: "halted" }
  | { type: "failed"; stage?: string; error?: string };

export const TERMINAL_EVENTS = new Set(["finished", "halted", "failed"]);

export interface DetectionBox {
  x: number;
  y: number;
  w: number;
  h: number;
  class_id: number;
  score: number;
}

export interface RunStats {
  run_id: string;
  state: RunState;
  histogram?: Record<string, number>;
  slide_level_call?: number | null;
  slide_level_class?: string | null;
  pixel_counts?: Record<string, number>;
  unprocessed_pixels?: number;
  detection_counts?: Record<string, number>;
}

export interface Rect {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface TileKey {
  level: number;
  col: number;
  row: number;
}

export const tileKeyId = (k: TileKey): string =>
  `${k.level}/${k.col}/${k.row}`;
