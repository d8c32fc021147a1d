"""Single-threaded reference executor for pipeline runs.

Processes the same patch plan strictly in order, one patch per model call,
with no queues or threads.  The concurrent pipeline must produce
byte-identical result layers.
"""

from __future__ import annotations

import numpy as np

from pyraflow.models import ModelRunner
from pyraflow.patchflow import (
    Heatmap,
    Patch,
    RunConfig,
    SegmentationResult,
    clamp_detection,
    nms,
    plan_patches,
    preprocess,
    source_level_for,
    translate_detection,
)
from pyraflow.pyramid import ImagePyramid

SEG_TASKS = {"patch_segmentation", "image_segmentation"}


def run_sequential(p: ImagePyramid, runner: ModelRunner,
                   config: RunConfig = RunConfig(), mask=None,
                   stop_after: int | None = None):
    """Returns (heatmap, segmentation, detections, plan)."""
    d = runner.descriptor
    task = d.task
    patch_size = config.patch_size or d.patch_size
    magnification = config.target_magnification or d.target_magnification

    if task == "image_segmentation":
        level = p.lowest_level
        lw, lh = p.level_size(level)
        plan = [Patch(0, 0, level, 0, 0, lw, lh, p.magnification(level))]
        grid_cols = grid_rows = 1
        nominal = None
        resize = False
    else:
        level = source_level_for(p, magnification)
        plan = plan_patches(p, mask, patch_size, magnification,
                            config.mask_keep_fraction)
        lw, lh = p.level_size(level)
        grid_cols = -(-lw // patch_size)
        grid_rows = -(-lh // patch_size)
        nominal = patch_size
        resize = True

    heatmap = None
    segmentation = None
    raw = []
    if task == "patch_classification":
        heatmap = Heatmap(grid_cols, grid_rows, d.num_classes)
    elif task in SEG_TASKS:
        segmentation = SegmentationResult(lw, lh, d.num_classes,
                                          config.result_policy,
                                          p.magnification(level))

    for index, patch in enumerate(plan):
        if stop_after is not None and index >= stop_after:
            break
        pixels = p.read_region(patch.level, patch.origin_x, patch.origin_y,
                               patch.width, patch.height)
        if nominal is not None and pixels.shape[:2] != (nominal, nominal):
            canvas = np.full((nominal, nominal, pixels.shape[2]), 255,
                             dtype=np.uint8)
            canvas[:pixels.shape[0], :pixels.shape[1]] = pixels
            pixels = canvas
        tensor = preprocess(pixels, d, resize)
        output = runner.invoke(tensor[np.newaxis])[0]
        if task == "patch_classification":
            heatmap.set_cell(patch.grid_col, patch.grid_row, output)
        elif task in SEG_TASKS:
            raster = np.asarray(output, dtype=np.uint8)
            segmentation.commit(patch.origin_x, patch.origin_y,
                                raster[:patch.height, :patch.width])
        else:
            for b in output:
                t = clamp_detection(
                    translate_detection(b, patch.level, patch.origin_x,
                                        patch.origin_y),
                    p.width, p.height)
                if t is not None:
                    raw.append(t)

    detections = nms(raw, config.nms_iou) if task == "detection" else None
    return heatmap, segmentation, detections, plan
