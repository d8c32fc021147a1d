"""Streaming sliding-window model execution over pyramid slides.

A run plans a non-overlapping patch grid on the source level matching the
requested magnification, optionally restricted to tissue, then pushes
patches through four concurrent stages (generate, preprocess, inference,
stitch) connected by bounded queues.  Classification outputs stitch into a
patch-grid heatmap, segmentation rasters into a class pyramid with
majority-vote coarser levels, detections into one accumulated, NMS-filtered
box list.  Results are readable while the run is still going, and a halt
request drains in-flight patches into a consistent partial result.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .models import (
    SEGMENTATION_TASKS,
    TASK_DETECTION,
    TASK_IMAGE_SEGMENTATION,
    TASK_PATCH_CLASSIFICATION,
    Detection,
    ModelDescriptor,
    ModelRunner,
)
from .pyramid import DEFAULT_POLICY, ImagePyramid, PyramidPolicy, create_pyramid

log = logging.getLogger(__name__)

UNPROCESSED = 255  # class value marking cells no patch has written

STAGE_GENERATOR = "patch_generator"
STAGE_NN_INPUT = "nn_input"
STAGE_NN_INFERENCE = "nn_inference"
STAGE_NN_OUTPUT = "nn_output"
STAGE_STITCHER = "patch_stitcher"
STAGES = (STAGE_GENERATOR, STAGE_NN_INPUT, STAGE_NN_INFERENCE,
          STAGE_NN_OUTPUT, STAGE_STITCHER)

STATE_RUNNING = "running"
STATE_FINISHED = "finished"
STATE_HALTED = "halted"
STATE_FAILED = "failed"

_ABORTED = object()  # queue item standing for "run is aborting"


class StageError(RuntimeError):
    """A pipeline stage raised; carries the stage name and original error."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"stage {stage!r} failed: {original!r}")
        self.stage = stage
        self.original = original


@dataclass(frozen=True)
class Patch:
    """One cell of the patch grid.  ``width``/``height`` are the pixels
    actually available at the source level; edge patches are smaller than
    the nominal patch size and get padded for the model, then cropped
    back."""

    grid_col: int
    grid_row: int
    level: int
    origin_x: int
    origin_y: int
    width: int
    height: int
    target_magnification: float
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)


def source_level_for(p: ImagePyramid, target_magnification: float) -> int:
    """Coarsest level whose magnification still reaches the target."""
    if target_magnification > p.base_magnification:
        raise ValueError(
            f"target magnification {target_magnification} exceeds base "
            f"{p.base_magnification}"
        )
    level = 0
    while (level + 1 < p.num_levels
           and p.magnification(level + 1) >= target_magnification):
        level += 1
    return level


def plan_patches(
    p: ImagePyramid,
    mask: np.ndarray | None,
    patch_size: int,
    target_magnification: float,
    mask_keep_fraction: float = 0.1,
) -> list[Patch]:
    """Row-major patch grid over the source level; with a tissue mask, a
    patch is kept only if enough of its projected mask area is tissue."""
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    level = source_level_for(p, target_magnification)
    lw, lh = p.level_size(level)
    scale = 1 << (p.lowest_level - level)
    patches = []
    for row in range(-(-lh // patch_size)):
        for col in range(-(-lw // patch_size)):
            x, y = col * patch_size, row * patch_size
            w = min(patch_size, lw - x)
            h = min(patch_size, lh - y)
            if mask is not None:
                mx0, my0 = x // scale, y // scale
                mx1, my1 = -(-(x + w) // scale), -(-(y + h) // scale)
                if mask[my0:my1, mx0:mx1].mean() < mask_keep_fraction:
                    continue
            patches.append(Patch(col, row, level, x, y, w, h,
                                 target_magnification))
    return patches


def preprocess(pixels: np.ndarray, descriptor: ModelDescriptor,
               resize: bool = True) -> np.ndarray:
    """Model input tensor: bilinear resize to the descriptor's input size
    when shapes differ, then intensities scaled from [0, 255] to [0, 1]."""
    arr = pixels
    h, w = arr.shape[:2]
    if resize and (w, h) != (descriptor.input_width, descriptor.input_height):
        image = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
        image = image.resize(
            (descriptor.input_width, descriptor.input_height),
            Image.BILINEAR,
        )
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
    return arr.astype(np.float32) / np.float32(255.0)


def make_batches(stream, batch_size: int):
    """Group a stream into order-preserving lists of ``batch_size``; the
    final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batch = []
    for item in stream:
        batch.append(item)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


# -- result layers ----------------------------------------------------------


class Heatmap:
    """Per-cell class confidences over the patch grid.  Cells start
    unprocessed, which is distinct from class 0."""

    def __init__(self, cols: int, rows: int, num_classes: int):
        if num_classes > 255:
            raise ValueError("at most 255 classes; value 255 marks unprocessed")
        self.cols = cols
        self.rows = rows
        self.num_classes = num_classes
        self.values = np.zeros((rows, cols, num_classes), dtype=np.float32)
        self.processed = np.zeros((rows, cols), dtype=bool)
        self._lock = threading.Lock()

    def set_cell(self, col: int, row: int, probs) -> None:
        arr = np.asarray(probs, dtype=np.float32)
        if arr.shape != (self.num_classes,):
            raise ValueError(f"expected {self.num_classes} confidences")
        with self._lock:
            if self.processed[row, col]:
                log.warning("heatmap cell (%d, %d) written twice; keeping "
                            "the newer value", col, row)
            self.values[row, col] = arr
            self.processed[row, col] = True

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        with self._lock:
            return self.values.copy(), self.processed.copy()

    def argmax_layer(self) -> tuple[np.ndarray, np.ndarray]:
        """(class, confidence) uint8 rasters; class 255 = unprocessed,
        confidence quantized as round(255 * max_confidence)."""
        values, processed = self.snapshot()
        best = values.argmax(axis=2)
        classes = best.astype(np.uint8)
        confidence = np.round(
            255.0 * np.take_along_axis(values, best[:, :, np.newaxis], axis=2)
        )[:, :, 0].astype(np.uint8)
        classes[~processed] = UNPROCESSED
        confidence[~processed] = 0
        return classes, confidence


def majority_downsample(block: np.ndarray) -> np.ndarray:
    """Halve a class raster: each output pixel takes the most frequent of
    its (up to) four children, ties going to the smallest class value.

    Odd edges replicate the last row/column, which scales every candidate's
    count equally and so preserves the vote outcome.
    """
    h, w = block.shape
    padded = np.pad(block, ((0, h % 2), (0, w % 2)), mode="edge")
    candidates = np.stack([
        padded[0::2, 0::2], padded[0::2, 1::2],
        padded[1::2, 0::2], padded[1::2, 1::2],
    ])
    counts = (candidates[:, None] == candidates[None, :]).sum(axis=1)
    score = counts.astype(np.int32) * 256 + (255 - candidates.astype(np.int32))
    winner = score.argmax(axis=0)
    return np.take_along_axis(candidates, winner[np.newaxis], axis=0)[0]


class SegmentationResult:
    """Class-index pyramid stitched from patch rasters.

    Level 0 matches the processed slide level; all pixels start at 255
    (unprocessed).  Each commit writes the patch raster and re-votes the
    affected blocks of every coarser level, which ends up identical to one
    full-image downsample pass once all patches are in.
    """

    def __init__(self, width: int, height: int, num_classes: int,
                 policy: PyramidPolicy = DEFAULT_POLICY,
                 base_magnification: float = 40.0):
        if num_classes > 255:
            raise ValueError("at most 255 classes; value 255 marks unprocessed")
        self.num_classes = num_classes
        self.pyramid = create_pyramid(width, height, 1, policy,
                                      base_magnification)
        for level in range(self.pyramid.num_levels):
            self.pyramid.level_array(level)[:] = UNPROCESSED
        self._lock = threading.Lock()

    def commit(self, x: int, y: int, raster: np.ndarray) -> None:
        arr = np.asarray(raster, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError("class raster must be 2-D")
        with self._lock:
            self.pyramid.write_region(0, x, y, arr[:, :, np.newaxis])
            self._refresh_coarser(x, y, arr.shape[1], arr.shape[0])

    def _refresh_coarser(self, x0: int, y0: int, w: int, h: int) -> None:
        x1, y1 = x0 + w, y0 + h
        for level in range(1, self.pyramid.num_levels):
            px0, py0 = x0 // 2, y0 // 2
            px1, py1 = -(-x1 // 2), -(-y1 // 2)
            child = self.pyramid.level_array(level - 1)[:, :, 0]
            block = child[2 * py0:min(2 * py1, child.shape[0]),
                          2 * px0:min(2 * px1, child.shape[1])]
            parent = self.pyramid.level_array(level)
            parent[py0:py1, px0:px1, 0] = majority_downsample(block)
            x0, y0, x1, y1 = px0, py0, px1, py1


# -- detections -------------------------------------------------------------


def iou(a: Detection, b: Detection) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-aware suppression: walk boxes by descending score and
    drop any same-class box overlapping a kept one at or above the
    threshold.  Ties order by (x, y, w, h, class_id) for determinism."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    ordered = sorted(detections,
                     key=lambda d: (-d.score, d.x, d.y, d.w, d.h, d.class_id))
    kept: list[Detection] = []
    for d in ordered:
        if any(k.class_id == d.class_id and iou(k, d) >= iou_threshold
               for k in kept):
            continue
        kept.append(d)
    return kept


def translate_detection(d: Detection, level: int, origin_x: int,
                        origin_y: int) -> Detection:
    """Patch-local box to level-0 coordinates."""
    s = 1 << level
    return replace(d, x=(origin_x + d.x) * s, y=(origin_y + d.y) * s,
                   w=d.w * s, h=d.h * s)


def clamp_detection(d: Detection, width: int, height: int) -> Detection | None:
    """Clip a level-0 box to the slide; None when nothing remains."""
    x0, y0 = max(0.0, d.x), max(0.0, d.y)
    x1 = min(float(width), d.x + d.w)
    y1 = min(float(height), d.y + d.h)
    if x1 <= x0 or y1 <= y0:
        return None
    return replace(d, x=x0, y=y0, w=x1 - x0, h=y1 - y0)


def accumulate_detections(stream, slide_width: int, slide_height: int,
                          nms_iou: float = 0.5) -> list[Detection]:
    """Concatenate per-patch boxes in level-0 coordinates, then suppress
    duplicates once over the union."""
    out: list[Detection] = []
    for patch, boxes in stream:
        for b in boxes:
            t = clamp_detection(
                translate_detection(b, patch.level, patch.origin_x,
                                    patch.origin_y),
                slide_width, slide_height,
            )
            if t is not None:
                out.append(t)
    return nms(out, nms_iou)


# -- the concurrent pipeline ------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Run parameters; patch size, magnification, and batch size default to
    the model descriptor's values."""

    patch_size: int | None = None
    target_magnification: float | None = None
    batch_size: int | None = None
    buffer_patches: int = 64
    mask_keep_fraction: float = 0.1
    nms_iou: float = 0.5
    result_policy: PyramidPolicy = DEFAULT_POLICY


class StageTimes:
    """Per-stage accumulated wall time and item counts."""

    def __init__(self):
        self.totals = {stage: 0.0 for stage in STAGES}
        self.counts = {stage: 0 for stage in STAGES}
        self._lock = threading.Lock()

    def add(self, stage: str, seconds: float, n: int = 1) -> None:
        with self._lock:
            self.totals[stage] += seconds
            self.counts[stage] += n

    def mean_ms(self, stage: str) -> float:
        with self._lock:
            count = self.counts[stage]
            return 1000.0 * self.totals[stage] / count if count else 0.0


class RunProgress:
    """Monotone done/total counter plus dirty regions since the last poll."""

    def __init__(self, total: int):
        self.total = total
        self._done = 0
        self._dirty: list[tuple[int, int, int, int, int]] = []
        self._lock = threading.Lock()

    def advance(self, region: tuple[int, int, int, int, int]) -> int:
        with self._lock:
            self._done += 1
            self._dirty.append(region)
            return self._done

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self._done, self.total

    def poll_dirty(self) -> list[tuple[int, int, int, int, int]]:
        with self._lock:
            dirty, self._dirty = self._dirty, []
            return dirty

    @property
    def done(self) -> int:
        with self._lock:
            return self._done


@dataclass
class RunResult:
    task: str
    state: str
    done: int
    total: int
    level: int
    grid_cols: int
    grid_rows: int
    heatmap: Heatmap | None
    segmentation: SegmentationResult | None
    detections: list[Detection] | None
    timings: StageTimes
    peak_resident_patches: int


class PipelineRun:
    """One in-flight pipeline execution.

    ``start`` spawns the four stage threads; ``join`` waits and returns the
    result, raising :class:`StageError` if a stage failed.  The result
    layers (``heatmap``/``segmentation``) and ``progress`` are live during
    the run.
    """

    def __init__(self, pyramid: ImagePyramid, runner: ModelRunner,
                 config: RunConfig = RunConfig(),
                 mask: np.ndarray | None = None,
                 observer=None):
        d = runner.descriptor
        self.pyramid = pyramid
        self.runner = runner
        self.config = config
        self.observer = observer
        self.task = d.task
        self._descriptor = d
        self._batch_size = config.batch_size or d.batch_size
        self._buffer = config.buffer_patches
        if self._buffer < self._batch_size:
            raise ValueError(
                f"buffer_patches {self._buffer} cannot hold one batch of "
                f"{self._batch_size}"
            )
        if d.input_channels != pyramid.channels:
            raise ValueError(
                f"model expects {d.input_channels} channels, slide has "
                f"{pyramid.channels}"
            )
        patch_size = config.patch_size or d.patch_size
        magnification = config.target_magnification or d.target_magnification

        if self.task == TASK_IMAGE_SEGMENTATION:
            # whole lowest level as a single patch, no resize or padding
            level = pyramid.lowest_level
            lw, lh = pyramid.level_size(level)
            self.plan = [Patch(0, 0, level, 0, 0, lw, lh,
                               pyramid.magnification(level))]
            self.grid_cols = self.grid_rows = 1
            self._nominal = None
            self._resize = False
        else:
            level = source_level_for(pyramid, magnification)
            if (self.task in SEGMENTATION_TASKS
                    and (d.input_width, d.input_height)
                    != (patch_size, patch_size)):
                raise ValueError(
                    "segmentation needs the model input size to equal the "
                    "patch size so output pixels map 1:1"
                )
            self.plan = plan_patches(pyramid, mask, patch_size, magnification,
                                     config.mask_keep_fraction)
            lw, lh = pyramid.level_size(level)
            self.grid_cols = -(-lw // patch_size)
            self.grid_rows = -(-lh // patch_size)
            self._nominal = patch_size
            self._resize = True
        self.level = level

        self.heatmap: Heatmap | None = None
        self.segmentation: SegmentationResult | None = None
        self._raw_detections: list[Detection] = []
        if self.task == TASK_PATCH_CLASSIFICATION:
            self.heatmap = Heatmap(self.grid_cols, self.grid_rows,
                                   d.num_classes)
        elif self.task in SEGMENTATION_TASKS:
            lw, lh = pyramid.level_size(level)
            self.segmentation = SegmentationResult(
                lw, lh, d.num_classes, config.result_policy,
                pyramid.magnification(level),
            )

        self.progress = RunProgress(len(self.plan))
        self.timings = StageTimes()
        self.state = STATE_RUNNING
        self.peak_resident_patches = 0
        self._resident = 0
        self._resident_lock = threading.Lock()
        self._q_pre = queue.Queue(maxsize=self._buffer)
        self._q_inf = queue.Queue(maxsize=self._buffer)
        self._q_out = queue.Queue(maxsize=self._buffer)
        self._slots = threading.Semaphore(self._buffer)
        self._halt = threading.Event()
        self._abort = threading.Event()
        self._error: tuple[str, BaseException] | None = None
        self._error_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    # -- control ------------------------------------------------------------

    def start(self) -> "PipelineRun":
        bodies = [
            (STAGE_GENERATOR, self._generate),
            (STAGE_NN_INPUT, self._preprocess_stage),
            (STAGE_NN_INFERENCE, self._inference_stage),
            (STAGE_STITCHER, self._stitch_stage),
        ]
        for name, body in bodies:
            t = threading.Thread(target=self._guard, args=(name, body),
                                 name=f"pipeline-{name}", daemon=True)
            self._threads.append(t)
            t.start()
        return self

    def halt(self) -> None:
        """Stop generating new patches; in-flight patches still commit."""
        self._halt.set()

    def current_detections(self) -> list[Detection]:
        """Suppressed snapshot of the boxes accumulated so far."""
        return nms(list(self._raw_detections), self.config.nms_iou)

    def join(self) -> RunResult:
        for t in self._threads:
            t.join()
        if self._error is not None:
            stage, original = self._error
            self.state = STATE_FAILED
            raise StageError(stage, original) from original
        done, total = self.progress.snapshot()
        self.state = STATE_FINISHED if done == total else STATE_HALTED
        detections = None
        if self.task == TASK_DETECTION:
            detections = nms(self._raw_detections, self.config.nms_iou)
        return RunResult(
            task=self.task, state=self.state, done=done, total=total,
            level=self.level, grid_cols=self.grid_cols,
            grid_rows=self.grid_rows, heatmap=self.heatmap,
            segmentation=self.segmentation, detections=detections,
            timings=self.timings,
            peak_resident_patches=self.peak_resident_patches,
        )

    # -- plumbing -----------------------------------------------------------

    def _guard(self, name: str, body) -> None:
        try:
            body()
        except BaseException as exc:
            with self._error_lock:
                if self._error is None:
                    self._error = (name, exc)
            self._abort.set()
            self._halt.set()

    def _put(self, q: queue.Queue, item) -> bool:
        while not self._abort.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _get(self, q: queue.Queue):
        while not self._abort.is_set():
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                continue
        return _ABORTED

    def _acquire_slot(self) -> bool:
        while not self._abort.is_set() and not self._halt.is_set():
            if self._slots.acquire(timeout=0.05):
                return True
        return False

    def _note_resident(self, delta: int) -> None:
        with self._resident_lock:
            self._resident += delta
            self.peak_resident_patches = max(self.peak_resident_patches,
                                             self._resident)

    # -- stages -------------------------------------------------------------

    def _generate(self) -> None:
        for patch in self.plan:
            if self._halt.is_set():
                break
            if not self._acquire_slot():
                break
            start = time.perf_counter()
            pixels = self.pyramid.read_region(
                patch.level, patch.origin_x, patch.origin_y,
                patch.width, patch.height,
            )
            padded = self._pad(pixels)
            self.timings.add(STAGE_GENERATOR, time.perf_counter() - start)
            self._note_resident(+1)
            if not self._put(self._q_pre, replace(patch, pixels=padded)):
                break
        self._put(self._q_pre, None)

    def _pad(self, pixels: np.ndarray) -> np.ndarray:
        # edge patches fill to nominal size with white so dark-is-foreground
        # mocks see background, and the stitcher crops the output back
        if self._nominal is None or pixels.shape[:2] == (self._nominal,
                                                         self._nominal):
            return pixels
        out = np.full((self._nominal, self._nominal, pixels.shape[2]), 255,
                      dtype=np.uint8)
        out[:pixels.shape[0], :pixels.shape[1]] = pixels
        return out

    def _preprocess_stage(self) -> None:
        while True:
            item = self._get(self._q_pre)
            if item is None or item is _ABORTED:
                break
            start = time.perf_counter()
            tensor = preprocess(item.pixels, self._descriptor, self._resize)
            self.timings.add(STAGE_NN_INPUT, time.perf_counter() - start)
            if not self._put(self._q_inf, (replace(item, pixels=None), tensor)):
                return
        self._put(self._q_inf, None)

    def _inference_stage(self) -> None:
        serialize = None if self.runner.thread_safe else threading.Lock()
        pending: list[tuple[Patch, np.ndarray]] = []
        ended = False
        while not ended:
            item = self._get(self._q_inf)
            if item is _ABORTED:
                return
            if item is None:
                ended = True
            else:
                pending.append(item)
            if pending and (len(pending) == self._batch_size or ended):
                start = time.perf_counter()
                batch = np.stack([tensor for _, tensor in pending])
                if serialize is None:
                    outputs = self.runner.invoke(batch)
                else:
                    with serialize:
                        outputs = self.runner.invoke(batch)
                self.timings.add(STAGE_NN_INFERENCE,
                                 time.perf_counter() - start, n=len(pending))
                for (patch, _), output in zip(pending, outputs):
                    if not self._put(self._q_out, (patch, output)):
                        return
                pending.clear()
        self._put(self._q_out, None)

    def _stitch_stage(self) -> None:
        while True:
            item = self._get(self._q_out)
            if item is None or item is _ABORTED:
                break
            patch, output = item
            start = time.perf_counter()
            converted = self._convert_output(patch, output)
            self.timings.add(STAGE_NN_OUTPUT, time.perf_counter() - start)
            start = time.perf_counter()
            self._commit(patch, converted)
            self.timings.add(STAGE_STITCHER, time.perf_counter() - start)
            self._note_resident(-1)
            self._slots.release()
            region = (patch.level, patch.origin_x, patch.origin_y,
                      patch.width, patch.height)
            done = self.progress.advance(region)
            if self.observer is not None:
                level, x, y, w, h = region
                self.observer({"type": "region", "level": level, "x": x,
                               "y": y, "w": w, "h": h})
                self.observer({"type": "progress", "done": done,
                               "total": self.progress.total})

    def _convert_output(self, patch: Patch, output):
        if self.task == TASK_PATCH_CLASSIFICATION:
            return np.asarray(output, dtype=np.float32)
        if self.task in SEGMENTATION_TASKS:
            raster = np.asarray(output, dtype=np.uint8)
            return raster[:patch.height, :patch.width]
        boxes = []
        for b in output:
            t = clamp_detection(
                translate_detection(b, patch.level, patch.origin_x,
                                    patch.origin_y),
                self.pyramid.width, self.pyramid.height,
            )
            if t is not None:
                boxes.append(t)
        return boxes

    def _commit(self, patch: Patch, converted) -> None:
        if self.task == TASK_PATCH_CLASSIFICATION:
            self.heatmap.set_cell(patch.grid_col, patch.grid_row, converted)
        elif self.task in SEGMENTATION_TASKS:
            self.segmentation.commit(patch.origin_x, patch.origin_y, converted)
        else:
            self._raw_detections.extend(converted)


def run_pipeline(pyramid: ImagePyramid, runner: ModelRunner,
                 config: RunConfig = RunConfig(),
                 mask: np.ndarray | None = None,
                 observer=None) -> RunResult:
    """Run a pipeline to completion and return its result."""
    return PipelineRun(pyramid, runner, config, mask, observer).start().join()
