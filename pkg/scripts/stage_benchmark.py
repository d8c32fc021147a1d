#!/usr/bin/env python3
"""Per-stage runtime benchmark across the three mock pipeline tasks.

Runs the warmup-then-measure protocol for classification, segmentation, and
detection over one synthetic slide, prints 95% confidence intervals per
stage, and writes the raw samples as one CSV per task.

    python3 scripts/stage_benchmark.py --runs 10 --warmups 1 --out bench-out
"""

import argparse
from pathlib import Path

from pyraflow.bench import export_samples_csv, run_benchmark, summarize
from pyraflow.models import ModelDescriptor, create_mock_runner
from pyraflow.patchflow import STAGES, RunConfig, run_pipeline
from pyraflow.pyramid import PyramidPolicy
from pyraflow.synthetic import SyntheticPyramid

TASKS = {
    "classification": ("patch_classification", 4, ("c0", "c1", "c2", "c3")),
    "segmentation": ("patch_segmentation", 2, ("background", "foreground")),
    "detection": ("detection", 1, ("object",)),
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--extent", type=int, default=2048,
                    help="synthetic slide width and height")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--warmups", type=int, default=1)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--buffer", type=int, default=32)
    ap.add_argument("--out", type=Path, default=None,
                    help="directory for per-task sample CSVs")
    args = ap.parse_args()

    slide = SyntheticPyramid(args.seed, args.extent, args.extent,
                             policy=PyramidPolicy(min_level_extent=1024))
    base = slide.magnification(0)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)

    for label, (task, num_classes, names) in TASKS.items():
        descriptor = ModelDescriptor(
            name=label, task=task, input_width=64, input_height=64,
            input_channels=3, num_classes=num_classes, class_names=names,
            target_magnification=base, patch_size=64,
            batch_size=args.batch_size,
        )
        runner = create_mock_runner(descriptor)
        config = RunConfig(buffer_patches=args.buffer)
        timings = run_benchmark(
            lambda: run_pipeline(slide, runner, config),
            warmups=args.warmups, runs=args.runs,
        )
        summary = summarize(timings)
        print(f"{label}: {timings.num_runs} runs "
              f"({args.warmups} warmup discarded)")
        for stage in STAGES:
            s = summary.stages[stage]
            print(f"  {stage:16s} {s.mean_ms:9.3f} ms "
                  f"+/- {s.ci_half_width_ms:.3f} (95% CI)")
        if args.out:
            path = args.out / f"{label}.csv"
            export_samples_csv(timings, path)
            print(f"  samples -> {path}")
    slide.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
