"""Text pipelines and projects.

A pipeline is a line-oriented script: ``stage <name> <kind>`` opens a
stage, indented ``attr <key> <value>`` lines attach attributes, ``#`` lines
are comments.  Executing a pipeline wires the tissue, patch, model, and
result stages into one patchflow run.  A project is a slide list processed
sequentially with per-slide result directories and a manifest that records
successes and failures.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .export import (
    export_detections_csv,
    export_heatmap,
    export_metaimage,
)
from .models import (
    SEGMENTATION_TASKS,
    TASK_DETECTION,
    TASK_PATCH_CLASSIFICATION,
    ModelRunner,
)
from .patchflow import PipelineRun, RunConfig, RunResult
from .pyramid import ImagePyramid, open_container
from .tissue import TissueParams, segment_tissue

log = logging.getLogger(__name__)

KIND_TISSUE = "tissue_segmentation"
KIND_PATCH_GENERATOR = "patch_generator"
KIND_BATCH_GENERATOR = "batch_generator"
KIND_NEURAL_NETWORK = "neural_network"
KIND_STITCHER = "stitcher"
KIND_ACCUMULATOR = "accumulator"
KIND_EXPORTER = "exporter"
STAGE_KINDS = frozenset({
    KIND_TISSUE, KIND_PATCH_GENERATOR, KIND_BATCH_GENERATOR,
    KIND_NEURAL_NETWORK, KIND_STITCHER, KIND_ACCUMULATOR, KIND_EXPORTER,
})

# typed attributes checked at parse time, kind -> {attr: caster}
_ATTR_TYPES = {
    KIND_TISSUE: {"threshold": float, "closing_radius": int,
                  "keep_fraction": float},
    KIND_PATCH_GENERATOR: {"patch_size": int, "magnification": float},
    KIND_BATCH_GENERATOR: {"batch_size": int},
    KIND_NEURAL_NETWORK: {},
    KIND_STITCHER: {},
    KIND_ACCUMULATOR: {"nms_iou": float},
    KIND_EXPORTER: {},
}


class PipelineError(ValueError):
    """Bad pipeline text or an unsatisfiable stage reference."""


@dataclass(frozen=True)
class PipelineStage:
    name: str
    kind: str
    attributes: tuple[tuple[str, str], ...] = ()

    def attr(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.attributes:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    stages: tuple[PipelineStage, ...] = ()

    def find(self, kind: str) -> PipelineStage | None:
        for stage in self.stages:
            if stage.kind == kind:
                return stage
        return None


def parse_pipeline(text: str, name: str = "pipeline",
                   known_models: set[str] | None = None) -> PipelineSpec:
    """Parse pipeline text; errors carry the offending line number.  With
    ``known_models`` given, neural_network stages must reference one."""
    stages: list[tuple[str, str, list[tuple[str, str]]]] = []
    seen_names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indented = raw[:1].isspace()
        tokens = stripped.split(maxsplit=2)
        if tokens[0] == "stage":
            if indented:
                raise PipelineError(f"line {lineno}: stage lines must not "
                                    "be indented")
            if len(tokens) != 3 or len(tokens[2].split()) != 1:
                raise PipelineError(
                    f"line {lineno}: expected 'stage <name> <kind>'"
                )
            stage_name, kind = tokens[1], tokens[2]
            if kind not in STAGE_KINDS:
                raise PipelineError(f"line {lineno}: unknown stage kind "
                                    f"{kind!r}")
            if stage_name in seen_names:
                raise PipelineError(f"line {lineno}: duplicate stage name "
                                    f"{stage_name!r}")
            seen_names.add(stage_name)
            stages.append((stage_name, kind, []))
        elif tokens[0] == "attr":
            if not stages:
                raise PipelineError(f"line {lineno}: attr before any stage")
            if len(tokens) != 3:
                raise PipelineError(
                    f"line {lineno}: expected 'attr <key> <value>'"
                )
            key, value = tokens[1], tokens[2]
            _, kind, attrs = stages[-1]
            caster = _ATTR_TYPES[kind].get(key)
            if caster is not None:
                try:
                    caster(value)
                except ValueError as exc:
                    raise PipelineError(
                        f"line {lineno}: bad {key} value {value!r}"
                    ) from exc
            if kind == KIND_NEURAL_NETWORK and key == "model":
                if known_models is not None and value not in known_models:
                    raise PipelineError(
                        f"line {lineno}: unknown model {value!r}"
                    )
            attrs.append((key, value))
        else:
            raise PipelineError(f"line {lineno}: expected 'stage' or 'attr', "
                                f"got {tokens[0]!r}")
    spec = PipelineSpec(
        name=name,
        stages=tuple(PipelineStage(n, k, tuple(a)) for n, k, a in stages),
    )
    _validate_chain(spec)
    return spec


def _validate_chain(spec: PipelineSpec) -> None:
    counts: dict[str, int] = {}
    for stage in spec.stages:
        counts[stage.kind] = counts.get(stage.kind, 0) + 1
    for kind, count in counts.items():
        if count > 1:
            raise PipelineError(f"at most one {kind} stage allowed")
    if counts.get(KIND_NEURAL_NETWORK, 0) != 1:
        raise PipelineError("pipeline needs exactly one neural_network stage")
    net = spec.find(KIND_NEURAL_NETWORK)
    if net.attr("model") is None:
        raise PipelineError("neural_network stage needs a 'model' attribute")
    if counts.get(KIND_STITCHER, 0) and counts.get(KIND_ACCUMULATOR, 0):
        raise PipelineError("stitcher and accumulator are mutually exclusive")


def print_pipeline(spec: PipelineSpec) -> str:
    """Canonical text form; parse_pipeline inverts it."""
    lines = []
    for stage in spec.stages:
        lines.append(f"stage {stage.name} {stage.kind}")
        for key, value in stage.attributes:
            lines.append(f"  attr {key} {value}")
    return "\n".join(lines) + "\n"


# -- execution --------------------------------------------------------------


def _tissue_params(stage: PipelineStage | None) -> TissueParams | None:
    if stage is None:
        return None
    defaults = TissueParams()
    return TissueParams(
        threshold=float(stage.attr("threshold", str(defaults.threshold))),
        closing_radius=int(stage.attr("closing_radius",
                                      str(defaults.closing_radius))),
    )


def build_run(spec: PipelineSpec, slide: ImagePyramid,
              runners: dict[str, ModelRunner], observer=None) -> PipelineRun:
    """Wire a pipeline spec into a ready-to-start run (pre-flight checks
    included, nothing executed yet)."""
    net = spec.find(KIND_NEURAL_NETWORK)
    if net is None:
        raise PipelineError("pipeline needs a neural_network stage")
    model_name = net.attr("model")
    runner = runners.get(model_name)
    if runner is None:
        raise PipelineError(f"unknown model {model_name!r}")
    task = runner.descriptor.task
    stitcher = spec.find(KIND_STITCHER)
    accumulator = spec.find(KIND_ACCUMULATOR)
    if task == TASK_DETECTION and stitcher is not None:
        raise PipelineError("detection results need an accumulator stage")
    if task != TASK_DETECTION and accumulator is not None:
        raise PipelineError("accumulator stage requires a detection model")
    if stitcher is not None:
        declared = stitcher.attr("kind")
        expected = ("classification" if task == TASK_PATCH_CLASSIFICATION
                    else "segmentation")
        if declared is not None and declared != expected:
            raise PipelineError(
                f"stitcher kind {declared!r} does not match task {task!r}"
            )

    mask = None
    tissue_stage = spec.find(KIND_TISSUE)
    params = _tissue_params(tissue_stage)
    if params is not None:
        mask = segment_tissue(slide, params)

    gen = spec.find(KIND_PATCH_GENERATOR)
    batch = spec.find(KIND_BATCH_GENERATOR)
    keep = (tissue_stage.attr("keep_fraction") if tissue_stage else None)
    config = RunConfig(
        patch_size=int(gen.attr("patch_size")) if gen and gen.attr("patch_size") else None,
        target_magnification=(float(gen.attr("magnification"))
                              if gen and gen.attr("magnification") else None),
        batch_size=(int(batch.attr("batch_size"))
                    if batch and batch.attr("batch_size") else None),
        mask_keep_fraction=float(keep) if keep is not None else 0.1,
        nms_iou=(float(accumulator.attr("nms_iou", "0.5"))
                 if accumulator else 0.5),
    )
    return PipelineRun(slide, runner, config, mask=mask, observer=observer)


def execute_pipeline(spec: PipelineSpec, slide: ImagePyramid,
                     runners: dict[str, ModelRunner],
                     observer=None) -> RunResult:
    """Run a pipeline over one slide to completion."""
    return build_run(spec, slide, runners, observer).start().join()


def export_result(result: RunResult, out_dir: str | Path) -> None:
    """Write a run's result layer(s) and a small JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result.heatmap is not None:
        export_heatmap(result.heatmap, out / "heatmap")
    if result.segmentation is not None:
        seg = result.segmentation.pyramid
        export_metaimage(seg.level_array(0)[:, :, 0], out / "segmentation.mhd")
    if result.detections is not None:
        export_detections_csv(result.detections, out / "detections.csv")
    (out / "result.json").write_text(json.dumps({
        "task": result.task,
        "state": result.state,
        "done": result.done,
        "total": result.total,
        "level": result.level,
    }, indent=2) + "\n")


# -- projects ---------------------------------------------------------------


@dataclass
class Project:
    """A named slide list rooted at a directory; results land under
    ``<root>/results/<slide_stem>/``."""

    name: str
    root: Path
    slides: list[Path] = field(default_factory=list)

    @property
    def results_dir(self) -> Path:
        return Path(self.root) / "results"

    @property
    def manifest_path(self) -> Path:
        return self.results_dir / "manifest.json"


def _result_dir_name(slide: Path, taken: set[str]) -> str:
    base = Path(slide).name
    name = base
    suffix = 2
    while name in taken:
        name = f"{base}_{suffix}"
        suffix += 1
    taken.add(name)
    return name


def run_for_project(project: Project, spec: PipelineSpec,
                    runners: dict[str, ModelRunner],
                    resume: bool = False) -> list[dict]:
    """Run one pipeline over every slide sequentially, in list order.

    A failing slide is recorded in the manifest and the run continues.
    With ``resume``, slides already marked success in an existing manifest
    are skipped.
    """
    project.results_dir.mkdir(parents=True, exist_ok=True)
    previous: dict[str, dict] = {}
    if resume and project.manifest_path.is_file():
        for entry in json.loads(project.manifest_path.read_text())["slides"]:
            previous[entry["slide"]] = entry
    entries: list[dict] = []
    taken: set[str] = set()
    for slide_path in project.slides:
        slide_key = str(slide_path)
        kept = previous.get(slide_key)
        if kept is not None and kept.get("status") == "success":
            entries.append(kept)
            taken.add(kept["result_dir"])
            continue
        result_dir = _result_dir_name(slide_path, taken)
        entry = {"slide": slide_key, "pipeline": spec.name,
                 "result_dir": result_dir}
        try:
            with open_container(slide_path) as slide:
                result = execute_pipeline(spec, slide, runners)
                export_result(result, project.results_dir / result_dir)
            entry["status"] = "success"
            entry["done"] = result.done
            entry["total"] = result.total
        except Exception as exc:
            log.warning("slide %s failed: %s", slide_path, exc)
            entry["status"] = "failed"
            entry["error"] = str(exc)
        entries.append(entry)
        _write_manifest(project, spec, entries)
    _write_manifest(project, spec, entries)
    return entries


def _write_manifest(project: Project, spec: PipelineSpec,
                    entries: list[dict]) -> None:
    project.manifest_path.write_text(json.dumps({
        "project": project.name,
        "pipeline": spec.name,
        "slides": entries,
    }, indent=2) + "\n")
