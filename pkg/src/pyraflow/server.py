"""HTTP service: slides, tiles, overlays, tissue preview, runs, and
a newline-delimited JSON event stream.

Storage is rooted at a data directory (``PYRAFLOW_DATA_DIR`` or the
``data_dir`` argument) holding ``slides/`` (containers), ``models/``
(descriptor text files), and ``pipelines/`` (pipeline scripts).  Overlay
tiles ship raw class and confidence bytes so clients restyle them without
another server round trip.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import threading
import uuid
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import BackgroundTasks, Body, FastAPI, Response
from fastapi.responses import JSONResponse, StreamingResponse
from PIL import Image

from .export import class_histogram, export_metaimage, slide_level_call
from .models import TASK_DETECTION, ModelRunner, create_mock_runner, parse_descriptor
from .orchestration import (
    PipelineError,
    PipelineSpec,
    build_run,
    parse_pipeline,
    print_pipeline,
)
from .patchflow import STATE_RUNNING, PipelineRun, StageError
from .pyramid import (
    ContainerError,
    ImagePyramid,
    RegionBoundsError,
    TileKey,
    open_container,
    save_container,
)
from .synthetic import SyntheticSlideSpec, generate_synthetic_slide
from .tilecache import DEFAULT_CACHE_BYTES, TileCache
from .tissue import MAX_DISTANCE, TissueParams, preview_tissue

DATA_DIR_ENV = "PYRAFLOW_DATA_DIR"
MAX_IMPORT_EXTENT = 8192


class EventJournal:
    """Append-only event list; subscribers replay it from the start and
    then follow live appends until a terminal event closes the stream."""

    def __init__(self):
        self._events: list[dict] = []
        self._cond = threading.Condition()
        self._closed = False

    def append(self, event: dict, terminal: bool = False) -> None:
        with self._cond:
            if self._closed:
                return
            self._events.append(event)
            if terminal:
                self._closed = True
            self._cond.notify_all()

    def subscribe(self):
        index = 0
        while True:
            with self._cond:
                while index >= len(self._events) and not self._closed:
                    self._cond.wait(timeout=0.5)
                if index >= len(self._events):
                    return
                event = self._events[index]
            index += 1
            yield event


@dataclass
class SlideEntry:
    id: str
    path: Path
    pyramid: ImagePyramid | None = None
    cache: TileCache | None = None


@dataclass
class RunEntry:
    id: str
    slide_id: str
    pipeline_name: str
    run: PipelineRun
    journal: EventJournal = field(default_factory=EventJournal)
    state: str = STATE_RUNNING
    error: str | None = None


def _png(array: np.ndarray, mode: str | None = None,
         headers: dict | None = None) -> Response:
    image = Image.fromarray(array, mode=mode)
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png",
                    headers=headers or {})


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(data_dir: str | Path | None = None,
               cache_bytes: int = DEFAULT_CACHE_BYTES,
               max_concurrent_runs: int = 1) -> FastAPI:
    root = Path(data_dir or os.environ.get(DATA_DIR_ENV, "pyraflow-data"))
    for sub in ("slides", "models", "pipelines"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="pyraflow")
    app.state.data_dir = root

    slides: dict[str, SlideEntry] = {}
    runners: dict[str, ModelRunner] = {}
    pipelines: dict[str, PipelineSpec] = {}
    runs: dict[str, RunEntry] = {}
    registry_lock = threading.Lock()

    def scan_registry() -> None:
        with registry_lock:
            for entry in sorted((root / "slides").iterdir()):
                if entry.is_dir() and (entry / "manifest.json").is_file():
                    slides.setdefault(entry.name, SlideEntry(entry.name, entry))
            for entry in sorted((root / "models").glob("*.txt")):
                descriptor = parse_descriptor(entry.read_text())
                runners[descriptor.name] = create_mock_runner(descriptor)
            for entry in sorted((root / "pipelines").glob("*.txt")):
                pipelines[entry.stem] = parse_pipeline(
                    entry.read_text(), name=entry.stem)

    scan_registry()

    def open_slide(entry: SlideEntry) -> SlideEntry:
        with registry_lock:
            if entry.pyramid is None:
                entry.pyramid = open_container(entry.path)
                entry.cache = TileCache(entry.pyramid, max_bytes=cache_bytes)
        return entry

    def slide_manifest(entry: SlideEntry) -> dict:
        manifest = json.loads((entry.path / "manifest.json").read_text())
        for level in manifest["levels"]:
            level["magnification"] = (
                manifest["base_magnification"] / (1 << level["index"]))
        manifest["id"] = entry.id
        return manifest

    # -- slides -------------------------------------------------------------

    @app.get("/slides")
    def list_slides():
        return [slide_manifest(entry) for entry in slides.values()]

    @app.get("/slides/{slide_id}")
    def get_slide(slide_id: str):
        entry = slides.get(slide_id)
        if entry is None:
            return _error(404, f"unknown slide {slide_id!r}")
        return slide_manifest(entry)

    @app.post("/slides/import", status_code=201)
    def import_slide(body: dict = Body(...)):
        name = body.get("name")
        width = body.get("width", 2048)
        height = body.get("height", 2048)
        seed = body.get("seed", 42)
        if not name or not str(name).isidentifier():
            return _error(400, "name must be an identifier")
        if name in slides:
            return _error(409, f"slide {name!r} already exists")
        if not (1 <= width <= MAX_IMPORT_EXTENT
                and 1 <= height <= MAX_IMPORT_EXTENT):
            return _error(400, f"extents must be in [1, {MAX_IMPORT_EXTENT}]")
        spec = SyntheticSlideSpec(
            num_blobs=body.get("num_blobs", 12),
            nuclei_per_blob=body.get("nuclei_per_blob", 60),
        )
        with generate_synthetic_slide(seed, width, height, spec) as slide:
            save_container(slide, root / "slides" / name)
        scan_registry()
        return slide_manifest(slides[name])

    # -- tiles --------------------------------------------------------------

    @app.get("/slides/{slide_id}/tiles/{level}/{col}/{row}")
    def get_tile(slide_id: str, level: int, col: int, row: int,
                 background: BackgroundTasks, fallback: int = 0):
        entry = slides.get(slide_id)
        if entry is None:
            return _error(404, f"unknown slide {slide_id!r}")
        open_slide(entry)
        key = TileKey(level, col, row)
        try:
            if fallback:
                tile, actual = entry.cache.resolve_with_fallback(key)
                background.add_task(entry.cache.process_pending, 8)
                headers = {"X-Actual-Level": str(actual)}
            else:
                tile = entry.cache.get_tile(key)
                headers = {}
        except RegionBoundsError as exc:
            return _error(404, str(exc))
        pixels = tile.pixels
        if pixels.shape[2] == 1:
            pixels = pixels[:, :, 0]
        return _png(pixels, headers=headers)

    # -- tissue preview -----------------------------------------------------

    @app.get("/slides/{slide_id}/tissue-preview")
    def tissue_preview(slide_id: str, threshold: float = 30.0,
                       radius: int = 2, downsample: int = 1):
        entry = slides.get(slide_id)
        if entry is None:
            return _error(404, f"unknown slide {slide_id!r}")
        if not 0 <= threshold <= MAX_DISTANCE:
            return _error(400, f"threshold must be in [0, {MAX_DISTANCE}]")
        if radius < 0:
            return _error(400, "radius must be >= 0")
        if downsample < 1:
            return _error(400, "downsample must be >= 1")
        open_slide(entry)
        params = TissueParams(threshold=threshold, closing_radius=radius)
        mask = preview_tissue(entry.pyramid, params, downsample)
        return _png(mask * np.uint8(255))

    # -- pipelines ----------------------------------------------------------

    @app.get("/pipelines")
    def list_pipelines():
        return [{"name": name, "text": print_pipeline(spec)}
                for name, spec in pipelines.items()]

    @app.post("/pipelines", status_code=201)
    def put_pipeline(body: dict = Body(...)):
        name = body.get("name")
        text = body.get("text", "")
        if not name or not str(name).isidentifier():
            return _error(400, "name must be an identifier")
        try:
            spec = parse_pipeline(text, name=name,
                                  known_models=set(runners))
        except PipelineError as exc:
            return _error(400, str(exc))
        pipelines[name] = spec
        (root / "pipelines" / f"{name}.txt").write_text(text)
        return {"name": name, "text": print_pipeline(spec)}

    @app.get("/models")
    def list_models():
        return [
            {
                "name": name,
                "task": runner.descriptor.task,
                "num_classes": runner.descriptor.num_classes,
                "class_names": list(runner.descriptor.class_names),
            }
            for name, runner in runners.items()
        ]

    # -- runs ---------------------------------------------------------------

    def run_info(entry: RunEntry) -> dict:
        done, total = entry.run.progress.snapshot()
        info = {
            "run_id": entry.id,
            "slide_id": entry.slide_id,
            "pipeline": entry.pipeline_name,
            "task": entry.run.task,
            "state": entry.state,
            "done": done,
            "total": total,
            "level": entry.run.level,
            "grid_cols": entry.run.grid_cols,
            "grid_rows": entry.run.grid_rows,
        }
        if entry.error is not None:
            info["error"] = entry.error
        return info

    def watch(entry: RunEntry) -> None:
        try:
            result = entry.run.join()
            entry.state = result.state
            entry.journal.append({"type": result.state}, terminal=True)
        except StageError as exc:
            entry.state = "failed"
            entry.error = str(exc)
            entry.journal.append(
                {"type": "failed", "stage": exc.stage,
                 "error": str(exc.original)},
                terminal=True,
            )

    @app.post("/slides/{slide_id}/runs", status_code=202)
    def start_run(slide_id: str, body: dict = Body(...)):
        slide_entry = slides.get(slide_id)
        if slide_entry is None:
            return _error(404, f"unknown slide {slide_id!r}")
        pipeline_name = body.get("pipeline")
        spec = pipelines.get(pipeline_name)
        if spec is None:
            return _error(404, f"unknown pipeline {pipeline_name!r}")
        open_slide(slide_entry)
        with registry_lock:
            active = sum(1 for r in runs.values() if r.state == STATE_RUNNING)
            if active >= max_concurrent_runs:
                return _error(409, "run concurrency limit reached")
            run_id = uuid.uuid4().hex[:12]
            journal = EventJournal()
            try:
                run = build_run(spec, slide_entry.pyramid, runners,
                                observer=journal.append)
            except (PipelineError, ValueError) as exc:
                return _error(400, str(exc))
            entry = RunEntry(id=run_id, slide_id=slide_id,
                             pipeline_name=pipeline_name, run=run,
                             journal=journal)
            runs[run_id] = entry
        journal.append({"type": "started", "run_id": run_id,
                        "total": run.progress.total})
        run.start()
        threading.Thread(target=watch, args=(entry,), daemon=True).start()
        return run_info(entry)

    @app.get("/runs")
    def list_runs():
        return [run_info(entry) for entry in runs.values()]

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        return run_info(entry)

    @app.post("/runs/{run_id}/halt", status_code=202)
    def halt_run(run_id: str):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        entry.run.halt()
        return run_info(entry)

    @app.get("/runs/{run_id}/events")
    def run_events(run_id: str):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")

        def stream():
            for event in entry.journal.subscribe():
                yield json.dumps(event) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    # -- overlays -----------------------------------------------------------

    @app.get("/runs/{run_id}/overlay/{level}/{col}/{row}")
    def overlay_tile(run_id: str, level: int, col: int, row: int):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        run = entry.run
        if run.heatmap is not None:
            if (level, col, row) != (0, 0, 0):
                return _error(404, "heatmap overlays have a single cell "
                                   "raster at 0/0/0")
            classes, confidence = run.heatmap.argmax_layer()
            return _png(np.stack([classes, confidence], axis=-1), mode="LA")
        if run.segmentation is not None:
            result = run.segmentation.pyramid
            try:
                tile = result.read_tile(TileKey(level, col, row))
            except RegionBoundsError as exc:
                return _error(404, str(exc))
            classes = tile.pixels[:, :, 0]
            alpha = np.where(classes == 255, 0, 255).astype(np.uint8)
            return _png(np.stack([classes, alpha], axis=-1), mode="LA")
        return _error(400, "detection runs have no raster overlay; "
                           "use /runs/{id}/detections")

    @app.get("/runs/{run_id}/detections")
    def run_detections(run_id: str, snapshot: int = 0):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        if entry.run.task != TASK_DETECTION:
            return _error(400, "not a detection run")
        if entry.state == STATE_RUNNING and not snapshot:
            return _error(409, "run in progress; pass snapshot=1 for a "
                               "mid-run view")
        boxes = entry.run.current_detections()
        return {
            "run_id": run_id,
            "detections": [
                {"x": d.x, "y": d.y, "w": d.w, "h": d.h,
                 "class_id": d.class_id, "score": d.score}
                for d in boxes
            ],
        }

    # -- stats and export ---------------------------------------------------

    @app.get("/runs/{run_id}/stats")
    def run_stats(run_id: str, snapshot: int = 0):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        if entry.state == STATE_RUNNING and not snapshot:
            return _error(409, "run in progress; pass snapshot=1 for a "
                               "mid-run view")
        run = entry.run
        done, total = run.progress.snapshot()
        stats: dict = {"run_id": run_id, "state": entry.state,
                       "done": done, "total": total}
        if run.heatmap is not None:
            histogram = class_histogram(run.heatmap)
            stats["histogram"] = {str(c): n for c, n in histogram.items()}
            names = run.runner.descriptor.class_names
            try:
                call = slide_level_call(run.heatmap)
                stats["slide_level_call"] = call
                stats["slide_level_class"] = names[call]
            except ValueError:
                stats["slide_level_call"] = None
        elif run.segmentation is not None:
            level0 = run.segmentation.pyramid.level_array(0)[:, :, 0]
            counts = np.bincount(level0.ravel(), minlength=256)
            stats["pixel_counts"] = {
                str(c): int(n) for c, n in enumerate(counts)
                if n > 0 and c != 255
            }
            stats["unprocessed_pixels"] = int(counts[255])
        else:
            boxes = run.current_detections()
            per_class: dict[str, int] = {}
            for d in boxes:
                per_class[str(d.class_id)] = per_class.get(str(d.class_id), 0) + 1
            stats["detection_counts"] = per_class
        return stats

    @app.get("/runs/{run_id}/export")
    def run_export(run_id: str, format: str = "mhd"):
        entry = runs.get(run_id)
        if entry is None:
            return _error(404, f"unknown run {run_id!r}")
        if entry.state == STATE_RUNNING:
            return _error(409, "run in progress")
        run = entry.run
        if format == "csv":
            if run.task != TASK_DETECTION:
                return _error(400, "csv export is for detection runs")
            boxes = run.current_detections()
            lines = ["x,y,w,h,class,score"]
            lines += [f"{int(d.x)},{int(d.y)},{int(d.w)},{int(d.h)},"
                      f"{d.class_id},{d.score:.6f}" for d in boxes]
            return Response(content="\n".join(lines) + "\n",
                            media_type="text/csv")
        if format != "mhd":
            return _error(400, f"unknown format {format!r}")
        if run.task == TASK_DETECTION:
            return _error(400, "detection runs export csv, not mhd")
        with tempfile.TemporaryDirectory(prefix="pyraflow-export-") as tmp:
            tmp_path = Path(tmp)
            if run.heatmap is not None:
                classes, confidence = run.heatmap.argmax_layer()
                export_metaimage(classes, tmp_path / "heatmap_classes.mhd")
                export_metaimage(confidence,
                                 tmp_path / "heatmap_confidence.mhd")
            else:
                level0 = run.segmentation.pyramid.level_array(0)[:, :, 0]
                export_metaimage(level0, tmp_path / "segmentation.mhd")
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w") as archive:
                for name in sorted(tmp_path.iterdir()):
                    archive.write(name, arcname=name.name)
        return Response(content=buf.getvalue(), media_type="application/zip",
                        headers={"Content-Disposition":
                                 f"attachment; filename={run_id}.zip"})

    return app


def serve(data_dir: str | Path | None = None, port: int = 8000,
          host: str = "127.0.0.1",
          cache_bytes: int = DEFAULT_CACHE_BYTES) -> None:
    """Run the HTTP server (blocking)."""
    import uvicorn

    uvicorn.run(create_app(data_dir, cache_bytes), host=host, port=port)
