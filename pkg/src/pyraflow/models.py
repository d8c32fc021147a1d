"""Model descriptors, the runner interface, and deterministic mock runners.

A model ships with a text descriptor (``key: value`` lines) stating its
task, input geometry, classes, and patch parameters.  Runners consume
normalized float batches and produce task-shaped outputs.  The mocks here
are pure functions of pixel intensity, so every downstream result can be
checked analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

TASK_PATCH_CLASSIFICATION = "patch_classification"
TASK_IMAGE_SEGMENTATION = "image_segmentation"
TASK_PATCH_SEGMENTATION = "patch_segmentation"
TASK_DETECTION = "detection"
TASKS = frozenset({
    TASK_PATCH_CLASSIFICATION,
    TASK_IMAGE_SEGMENTATION,
    TASK_PATCH_SEGMENTATION,
    TASK_DETECTION,
})
SEGMENTATION_TASKS = frozenset({TASK_IMAGE_SEGMENTATION, TASK_PATCH_SEGMENTATION})


class DescriptorError(ValueError):
    """Descriptor text is malformed or violates an invariant."""


@dataclass(frozen=True)
class Detection:
    """One box with its class and confidence.  Coordinates are in whatever
    frame the producer declares (patch-local from runners, level-0 after
    accumulation)."""

    x: float
    y: float
    w: float
    h: float
    class_id: int
    score: float


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    task: str
    input_width: int
    input_height: int
    input_channels: int
    num_classes: int
    class_names: tuple[str, ...]
    target_magnification: float
    patch_size: int
    batch_size: int = 1
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DescriptorError(f"unknown task {self.task!r}")
        if min(self.input_width, self.input_height, self.input_channels,
               self.num_classes, self.patch_size) <= 0:
            raise DescriptorError("sizes and counts must be positive")
        if self.target_magnification <= 0:
            raise DescriptorError("magnification must be positive")
        if self.batch_size < 1:
            raise DescriptorError("batch_size must be >= 1")
        if len(self.class_names) != self.num_classes:
            raise DescriptorError(
                f"{len(self.class_names)} class_names for "
                f"num_classes {self.num_classes}"
            )


def _parse_input_size(value: str) -> tuple[int, int, int]:
    parts = value.split()
    if len(parts) != 3:
        raise ValueError("expected three integers")
    w, h, c = (int(p) for p in parts)
    return w, h, c


_PARSERS = {
    "name": str,
    "task": str,
    "input_size": _parse_input_size,
    "num_classes": int,
    "class_names": lambda v: tuple(s.strip() for s in v.split(";") if s.strip()),
    "magnification": float,
    "patch_size": int,
    "batch_size": int,
}
_REQUIRED_KEYS = ("name", "task", "input_size", "num_classes", "class_names",
                  "magnification", "patch_size")


def parse_descriptor(text: str) -> ModelDescriptor:
    """Parse descriptor text.  Unknown keys become warnings on the result;
    structural problems raise with the offending line number."""
    values: dict[str, object] = {}
    warnings: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise DescriptorError(f"line {lineno}: expected 'key: value'")
        key, value = key.strip(), value.strip()
        parser = _PARSERS.get(key)
        if parser is None:
            warnings.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            warnings.append(f"line {lineno}: duplicate key {key!r} "
                            "overrides earlier value")
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise DescriptorError(
                f"line {lineno}: bad value for {key!r}: {exc}"
            ) from exc
    for key in _REQUIRED_KEYS:
        if key not in values:
            raise DescriptorError(f"missing required key: {key}")
    iw, ih, ic = values["input_size"]
    return ModelDescriptor(
        name=values["name"],
        task=values["task"],
        input_width=iw,
        input_height=ih,
        input_channels=ic,
        num_classes=values["num_classes"],
        class_names=values["class_names"],
        target_magnification=values["magnification"],
        patch_size=values["patch_size"],
        batch_size=values.get("batch_size", 1),
        warnings=tuple(warnings),
    )


def format_descriptor(d: ModelDescriptor) -> str:
    """Canonical descriptor text; parse_descriptor inverts it."""
    return "\n".join([
        f"name: {d.name}",
        f"task: {d.task}",
        f"input_size: {d.input_width} {d.input_height} {d.input_channels}",
        f"num_classes: {d.num_classes}",
        f"class_names: {'; '.join(d.class_names)}",
        f"magnification: {d.target_magnification}",
        f"patch_size: {d.patch_size}",
        f"batch_size: {d.batch_size}",
    ]) + "\n"


class ModelRunner:
    """Turns normalized (N, H, W, C) float batches into task outputs.

    Runners that cannot take concurrent invoke calls set ``thread_safe``
    False; the pipeline serializes calls to them.
    """

    thread_safe = True

    def __init__(self, descriptor: ModelDescriptor):
        self.descriptor = descriptor

    def invoke(self, batch: np.ndarray):
        raise NotImplementedError


def _check_batch(batch: np.ndarray) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) batch, got shape {arr.shape}")
    return arr


class MockClassifier(ModelRunner):
    """Four-way classifier: mean intensity m maps to one-hot class
    clamp(floor(m * 4), 0, 3)."""

    def __init__(self, descriptor: ModelDescriptor):
        if descriptor.task != TASK_PATCH_CLASSIFICATION:
            raise ValueError("descriptor task must be patch_classification")
        if descriptor.num_classes != 4:
            raise ValueError("mock classifier is 4-class")
        super().__init__(descriptor)

    def invoke(self, batch: np.ndarray) -> np.ndarray:
        arr = _check_batch(batch)
        means = arr.reshape(arr.shape[0], -1).mean(axis=1)
        classes = np.clip(np.floor(means * 4).astype(np.int64), 0, 3)
        out = np.zeros((arr.shape[0], 4), dtype=np.float32)
        out[np.arange(arr.shape[0]), classes] = 1.0
        return out


class MockSegmenter(ModelRunner):
    """Two-class per-pixel segmenter: class 1 where the channel mean is
    below 0.5 (dark = foreground)."""

    def __init__(self, descriptor: ModelDescriptor):
        if descriptor.task not in SEGMENTATION_TASKS:
            raise ValueError("descriptor task must be a segmentation task")
        if descriptor.num_classes != 2:
            raise ValueError("mock segmenter is 2-class")
        super().__init__(descriptor)

    def invoke(self, batch: np.ndarray) -> np.ndarray:
        arr = _check_batch(batch)
        return (arr.mean(axis=3) < 0.5).astype(np.uint8)


class MockDetector(ModelRunner):
    """Boxes around 4-connected components of the dark mask; score is the
    component's fill fraction of its bounding box."""

    def __init__(self, descriptor: ModelDescriptor, min_area: int = 4):
        if descriptor.task != TASK_DETECTION:
            raise ValueError("descriptor task must be detection")
        super().__init__(descriptor)
        self.min_area = min_area

    def invoke(self, batch: np.ndarray) -> list[list[Detection]]:
        arr = _check_batch(batch)
        results = []
        for patch in arr:
            dark = patch.mean(axis=2) < 0.5
            labels, count = ndimage.label(dark)
            boxes: list[Detection] = []
            if count:
                areas = np.bincount(labels.ravel())
                for index, slices in enumerate(ndimage.find_objects(labels), 1):
                    area = int(areas[index])
                    if area < self.min_area:
                        continue
                    sy, sx = slices
                    w = sx.stop - sx.start
                    h = sy.stop - sy.start
                    boxes.append(Detection(
                        x=float(sx.start), y=float(sy.start),
                        w=float(w), h=float(h),
                        class_id=0, score=area / (w * h),
                    ))
            results.append(boxes)
        return results


def create_mock_runner(descriptor: ModelDescriptor) -> ModelRunner:
    """Runner matching the descriptor's task."""
    if descriptor.task == TASK_PATCH_CLASSIFICATION:
        return MockClassifier(descriptor)
    if descriptor.task in SEGMENTATION_TASKS:
        return MockSegmenter(descriptor)
    return MockDetector(descriptor)
