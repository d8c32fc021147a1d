import { ApiClient } from "./api.js";
import {
  clampView,
  gridFor,
  levelForZoom,
  tilesForViewport,
  viewportAtLevel,
} from "./geometry.js";
import {
  colorize,
  defaultStyle,
  heatmapGeometry,
  segmentationGeometry,
  OverlayStore,
  type OverlayCells,
  type OverlayStyle,
} from "./overlay.js";
import { PreviewController } from "./preview.js";
import { RunController } from "./runpanel.js";
import { formatStats } from "./stats.js";
import { savePipeline, tokenize } from "./editor.js";
import { TileQueue } from "./tilequeue.js";
import { tileKeyId, type Rect, type RunInfo, type SlideManifest,
         type TileKey } from "./types.js";

const api = new ApiClient("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

async function decodePng(blob: Blob): Promise<ImageBitmap> {
  return createImageBitmap(blob);
}

/** Decode an overlay PNG into class + confidence byte planes. */
async function decodeOverlay(blob: Blob): Promise<OverlayCells> {
  const bitmap = await decodePng(blob);
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("2d context unavailable");
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const n = bitmap.width * bitmap.height;
  const classes = new Uint8Array(n);
  const confidence = new Uint8Array(n);
  for (let i = 0; i < n; i += 1) {
    classes[i] = data[i * 4];
    confidence[i] = data[i * 4 + 3];
  }
  return { width: bitmap.width, height: bitmap.height, classes, confidence };
}

class Viewer {
  manifest: SlideManifest | null = null;
  view: Rect = { x: 0, y: 0, w: 1, h: 1 };
  private tiles = new Map<string, ImageBitmap>();
  private queue: TileQueue<void>;
  private dirty = false;
  overlayStore: OverlayStore | null = null;
  overlayStyle: OverlayStyle = defaultStyle(4);
  overlayLevel = 0;
  overlayOn = true;
  private colored = new Map<string, ImageData>();

  constructor(private readonly canvas: HTMLCanvasElement) {
    this.queue = new TileQueue((id) => this.loadTile(id), 8);
    canvas.addEventListener("pointerdown", (e) => this.onDrag(e));
    canvas.addEventListener("wheel", (e) => this.onWheel(e),
                            { passive: false });
  }

  async open(manifest: SlideManifest): Promise<void> {
    this.manifest = manifest;
    this.tiles.clear();
    this.colored.clear();
    const aspect = this.canvas.height / this.canvas.width;
    this.view = {
      x: 0,
      y: (manifest.height - manifest.width * aspect) / 2,
      w: manifest.width,
      h: manifest.width * aspect,
    };
    this.redraw();
  }

  private async loadTile(id: string): Promise<void> {
    if (this.manifest === null) return;
    const [level, col, row] = id.split("/").map(Number);
    const response = await fetch(
      api.tileUrl(this.manifest.id, level, col, row, true));
    if (!response.ok) throw new Error(`tile ${id}: HTTP ${response.status}`);
    const bitmap = await decodePng(await response.blob());
    this.tiles.set(id, bitmap);
    this.redraw();
  }

  setOverlayStyle(style: OverlayStyle): void {
    this.overlayStyle = style;
    this.colored.clear(); // restyle is a pure recomputation, no fetches
    this.redraw();
  }

  overlayChanged(): void {
    this.colored.clear();
    this.redraw();
  }

  redraw(): void {
    if (this.dirty) return;
    this.dirty = true;
    requestAnimationFrame(() => {
      this.dirty = false;
      this.paint();
    });
  }

  private paint(): void {
    const m = this.manifest;
    const ctx = this.canvas.getContext("2d");
    if (m === null || ctx === null) return;
    ctx.fillStyle = "#202228";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    const zoom = this.view.w / this.canvas.width;
    const level = levelForZoom(Math.max(zoom, 1e-9), m.levels.length);
    const scaled = viewportAtLevel(this.view, level);
    const grid = gridFor(m, level);
    const toScreenX = (lx: number): number =>
      ((lx - scaled.x) / scaled.w) * this.canvas.width;
    const toScreenY = (ly: number): number =>
      ((ly - scaled.y) / scaled.h) * this.canvas.height;
    ctx.imageSmoothingEnabled = zoom / 2 ** level > 1;
    for (const key of tilesForViewport(scaled, level, m.tile_size,
                                       grid.cols, grid.rows)) {
      const id = tileKeyId(key);
      const bitmap = this.tiles.get(id);
      const x0 = toScreenX(key.col * m.tile_size);
      const y0 = toScreenY(key.row * m.tile_size);
      const x1 = toScreenX(key.col * m.tile_size +
                           (bitmap?.width ?? m.tile_size));
      const y1 = toScreenY(key.row * m.tile_size +
                           (bitmap?.height ?? m.tile_size));
      if (bitmap === undefined) {
        void this.queue.request(id).catch(() => this.redraw());
        ctx.fillStyle = "#2c2f38";
        ctx.fillRect(x0, y0, x1 - x0, y1 - y0);
      } else {
        ctx.drawImage(bitmap, x0, y0, x1 - x0, y1 - y0);
      }
    }
    this.paintOverlay(ctx);
  }

  private paintOverlay(ctx: CanvasRenderingContext2D): void {
    const store = this.overlayStore;
    const m = this.manifest;
    if (store === null || m === null || !this.overlayOn) return;
    // Overlay rasters live at the run level; map into the current view.
    const scaledView = viewportAtLevel(this.view, this.overlayLevel);
    for (const [id, cells] of store.entries()) {
      let image = this.colored.get(id);
      if (image === undefined) {
        const rgba = colorize(cells, this.overlayStyle);
        image = new ImageData(new Uint8ClampedArray(rgba), cells.width,
                              cells.height);
        this.colored.set(id, image);
      }
      const [, colStr, rowStr] = id.split("/");
      const geometry = store.geometryInfo();
      const originX = Number(colStr) * geometry.tileSize * geometry.cellWidth;
      const originY = Number(rowStr) * geometry.tileSize * geometry.cellHeight;
      const cellW = geometry.cellWidth;
      const cellH = geometry.cellHeight;
      const tile = document.createElement("canvas");
      tile.width = cells.width;
      tile.height = cells.height;
      const tctx = tile.getContext("2d");
      if (tctx === null) continue;
      tctx.putImageData(image, 0, 0);
      const x0 = ((originX - scaledView.x) / scaledView.w) * this.canvas.width;
      const y0 = ((originY - scaledView.y) / scaledView.h) *
        this.canvas.height;
      const w = ((cells.width * cellW) / scaledView.w) * this.canvas.width;
      const h = ((cells.height * cellH) / scaledView.h) * this.canvas.height;
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(tile, x0, y0, w, h);
    }
  }

  private onDrag(down: PointerEvent): void {
    const start = { ...this.view };
    const sx = down.clientX;
    const sy = down.clientY;
    const move = (e: PointerEvent): void => {
      const m = this.manifest;
      if (m === null) return;
      const dx = ((e.clientX - sx) / this.canvas.width) * this.view.w;
      const dy = ((e.clientY - sy) / this.canvas.height) * this.view.h;
      this.view = clampView({ ...this.view, x: start.x - dx, y: start.y - dy },
                            m.width, m.height);
      this.redraw();
    };
    const up = (): void => {
      window.removeEventListener("pointermove", move);
      window.removeEventListener("pointerup", up);
    };
    window.addEventListener("pointermove", move);
    window.addEventListener("pointerup", up);
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    const m = this.manifest;
    if (m === null) return;
    const factor = e.deltaY > 0 ? 1.25 : 0.8;
    const rect = this.canvas.getBoundingClientRect();
    const fx = (e.clientX - rect.left) / rect.width;
    const fy = (e.clientY - rect.top) / rect.height;
    const cx = this.view.x + fx * this.view.w;
    const cy = this.view.y + fy * this.view.h;
    const w = Math.min(Math.max(this.view.w * factor, 16), m.width * 4);
    const h = (w / this.view.w) * this.view.h;
    this.view = clampView(
      { x: cx - fx * w, y: cy - fy * h, w, h }, m.width, m.height);
    this.redraw();
  }
}

async function overlayFetcher(run: RunInfo, key: TileKey):
    Promise<OverlayCells> {
  const response = await fetch(
    api.overlayUrl(run.run_id, key.level, key.col, key.row));
  if (!response.ok) {
    throw new Error(`overlay ${tileKeyId(key)}: HTTP ${response.status}`);
  }
  return decodeOverlay(await response.blob());
}

function storeForRun(run: RunInfo, manifest: SlideManifest,
                     patchSize: number): OverlayStore {
  if (run.task === "detection") {
    throw new Error("detection runs draw boxes, not rasters");
  }
  if (run.task === "patch_classification") {
    const geometry = heatmapGeometry(run.grid_cols, run.grid_rows, patchSize);
    return new OverlayStore(geometry, (key) => overlayFetcher(run, key));
  }
  const levelW = Math.ceil(manifest.width / 2 ** run.level);
  const levelH = Math.ceil(manifest.height / 2 ** run.level);
  return new OverlayStore(segmentationGeometry(levelW, levelH, 256),
                          (key) => overlayFetcher(run, key));
}

async function main(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("viewer");
  const viewer = new Viewer(canvas);
  const slideSelect = el<HTMLSelectElement>("slide-select");
  const pipelineSelect = el<HTMLSelectElement>("pipeline-select");
  const progress = el<HTMLProgressElement>("run-progress");
  const state = el<HTMLSpanElement>("run-state");
  const statsPre = el<HTMLPreElement>("stats");
  const editorArea = el<HTMLTextAreaElement>("editor");
  const editorStatus = el<HTMLDivElement>("editor-status");
  const highlight = el<HTMLPreElement>("editor-highlight");

  const slides = await api.listSlides();
  for (const slide of slides) {
    slideSelect.add(new Option(
      `${slide.id} (${slide.width}x${slide.height})`, slide.id));
  }
  const pipelines = await api.listPipelines();
  for (const pipeline of pipelines) {
    pipelineSelect.add(new Option(pipeline.name, pipeline.name));
  }

  let manifest: SlideManifest | null = null;
  const openSelected = async (): Promise<void> => {
    manifest = await api.getSlide(slideSelect.value);
    await viewer.open(manifest);
  };
  slideSelect.addEventListener("change", () => void openSelected());
  if (slides.length > 0) await openSelected();

  let controller: RunController | null = null;
  el<HTMLButtonElement>("run-start").addEventListener("click", () => {
    void (async () => {
      if (manifest === null) return;
      controller?.stop();
      const store = { current: null as OverlayStore | null };
      controller = new RunController(api, null, {
        onProgress: (done, total) => {
          progress.max = total;
          progress.value = done;
        },
        onStateChange: (s) => {
          state.textContent = s;
        },
      });
      const info = await controller.start(manifest.id, pipelineSelect.value);
      state.textContent = info.state;
      progress.max = info.total;
      progress.value = info.done;
      if (info.task !== "detection") {
        store.current = storeForRun(info, manifest, 64);
        viewer.overlayStore = store.current;
        viewer.overlayLevel = info.level;
        const withOverlay = new RunController(api, store.current, {
          onOverlayUpdate: () => viewer.overlayChanged(),
          onProgress: (done, total) => {
            progress.max = total;
            progress.value = done;
          },
          onStateChange: (s) => {
            state.textContent = s;
          },
        });
        controller.stop();
        controller = withOverlay;
        withOverlay.attach(info);
      }
      await controller.finished();
      const stats = await api.getStats(info.run_id);
      statsPre.textContent = formatStats(stats)
        .map((row) => `${row.label}: ${row.value}`)
        .join("\n");
    })();
  });
  el<HTMLButtonElement>("run-halt").addEventListener("click", () => {
    void controller?.halt();
  });

  const opacity = el<HTMLInputElement>("overlay-opacity");
  opacity.addEventListener("input", () => {
    const style = viewer.overlayStyle;
    for (const entry of style.values()) {
      entry.opacity = Number(opacity.value) / 100;
    }
    viewer.setOverlayStyle(style);
  });
  el<HTMLInputElement>("overlay-scale-confidence")
    .addEventListener("change", (e) => {
      const checked = (e.target as HTMLInputElement).checked;
      const style = viewer.overlayStyle;
      for (const entry of style.values()) {
        entry.confidenceScalesOpacity = checked;
      }
      viewer.setOverlayStyle(style);
    });

  let preview: PreviewController | null = null;
  const previewImage = el<HTMLImageElement>("preview-image");
  const attachPreview = (): void => {
    preview?.stop();
    if (manifest === null) return;
    preview = new PreviewController(api, manifest.id, {
      onPreview: (layer) => {
        previewImage.src = URL.createObjectURL(
          new Blob([layer.bytes], { type: "image/png" }));
      },
      onError: (message) => {
        editorStatus.textContent = message;
      },
    });
  };
  slideSelect.addEventListener("change", attachPreview);
  attachPreview();
  el<HTMLInputElement>("tissue-threshold").addEventListener("input", (e) => {
    preview?.setThreshold(Number((e.target as HTMLInputElement).value));
  });
  el<HTMLInputElement>("tissue-radius").addEventListener("input", (e) => {
    preview?.setRadius(Number((e.target as HTMLInputElement).value));
  });

  const renderHighlight = (): void => {
    const classes: Record<string, string> = {
      keyword: "tok-keyword",
      "stage-kind": "tok-kind",
      name: "tok-name",
      "attr-key": "tok-attr",
      value: "tok-value",
      comment: "tok-comment",
      plain: "tok-plain",
    };
    const lines = editorArea.value.split("\n");
    const byLine: string[] = lines.map(() => "");
    for (const token of tokenize(editorArea.value)) {
      const safe = token.text.replace(/&/g, "&amp;").replace(/</g, "&lt;");
      byLine[token.line - 1] +=
        `<span class="${classes[token.kind]}">${safe}</span> `;
    }
    highlight.innerHTML = byLine.join("\n");
  };
  editorArea.addEventListener("input", renderHighlight);
  renderHighlight();

  el<HTMLButtonElement>("editor-save").addEventListener("click", () => {
    void (async () => {
      const name = el<HTMLInputElement>("editor-name").value;
      const result = await savePipeline(api, name, editorArea.value);
      if (result.ok) {
        editorStatus.textContent = `saved ${result.pipeline.name}`;
        pipelineSelect.add(new Option(result.pipeline.name,
                                      result.pipeline.name));
      } else {
        const where = result.failure.line !== undefined
          ? ` (line ${result.failure.line})`
          : "";
        editorStatus.textContent = result.failure.message + where;
      }
    })();
  });
}

window.addEventListener("DOMContentLoaded", () => void main());
