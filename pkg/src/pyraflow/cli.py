"""Command-line entry points.

``serve`` hosts the HTTP API; ``bench run`` times a pipeline with warmup
and repeated runs; ``bench memory`` replays a headless viewing scenario and
reports resident-set usage; ``synth`` and ``import-image`` create slide
containers; ``run`` executes one pipeline headless.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _build_runners(models_dir: Path):
    from .models import create_mock_runner, parse_descriptor

    runners = {}
    for path in sorted(models_dir.glob("*.txt")):
        descriptor = parse_descriptor(path.read_text())
        runners[descriptor.name] = create_mock_runner(descriptor)
    return runners


def _cmd_serve(args) -> int:
    from .server import serve

    serve(data_dir=args.data_dir, port=args.port, host=args.host,
          cache_bytes=args.cache_mb * 2**20)
    return 0


def _cmd_synth(args) -> int:
    from .pyramid import save_container
    from .synthetic import SyntheticSlideSpec, generate_synthetic_slide

    spec = SyntheticSlideSpec(num_blobs=args.blobs)
    with generate_synthetic_slide(args.seed, args.width, args.height,
                                  spec) as slide:
        save_container(slide, args.dest)
    print(f"wrote {args.width}x{args.height} slide to {args.dest}")
    return 0


def _cmd_import_image(args) -> int:
    from .pyramid import import_flat_image, save_container

    with import_flat_image(args.source,
                           base_magnification=args.magnification) as slide:
        save_container(slide, args.dest)
    print(f"imported {args.source} -> {args.dest}")
    return 0


def _cmd_run(args) -> int:
    from .orchestration import execute_pipeline, export_result, parse_pipeline
    from .pyramid import open_container

    runners = _build_runners(Path(args.models))
    spec = parse_pipeline(Path(args.pipeline).read_text(),
                          name=Path(args.pipeline).stem,
                          known_models=set(runners))
    with open_container(args.slide) as slide:
        result = execute_pipeline(spec, slide, runners)
        if args.out:
            export_result(result, args.out)
    print(f"{result.state}: {result.done}/{result.total} patches")
    return 0


def _cmd_bench_run(args) -> int:
    from .bench import export_samples_csv, run_benchmark, summarize
    from .orchestration import execute_pipeline, parse_pipeline
    from .patchflow import STAGES
    from .pyramid import open_container

    runners = _build_runners(Path(args.models))
    spec = parse_pipeline(Path(args.pipeline).read_text(),
                          name=Path(args.pipeline).stem,
                          known_models=set(runners))
    with open_container(args.slide) as slide:
        timings = run_benchmark(
            lambda: execute_pipeline(spec, slide, runners),
            warmups=args.warmups, runs=args.runs,
        )
    if args.out:
        export_samples_csv(timings, args.out)
    summary = summarize(timings)
    print(f"{timings.num_runs} runs ({args.warmups} warmup discarded)")
    for stage in STAGES:
        s = summary.stages[stage]
        print(f"  {stage:16s} {s.mean_ms:9.3f} ms "
              f"+/- {s.ci_half_width_ms:.3f} (95% CI)")
    if summary.degenerate:
        print("  single run: confidence intervals undefined, reported as 0")
    return 0


def _cmd_bench_memory(args) -> int:
    from .bench import memory_scenario

    report = memory_scenario(
        args.scenario, seconds=args.seconds,
        budget_bytes=args.budget_mb * 2**20,
        slide_extent=args.extent, seed=args.seed, paced=args.paced,
    )
    print(json.dumps({
        "scenario": report.scenario,
        "peak_rss": report.peak_rss,
        "final_rss": report.final_rss,
        "rss_samples": report.rss_samples,
        "tile_loads": report.tile_loads,
        "steps": report.steps,
        "budget_bytes": args.budget_mb * 2**20,
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyraflow",
        description="Memory-bounded pyramid slides, pipelines, and serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="host the HTTP API")
    serve.add_argument("--data-dir", default=None)
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--cache-mb", type=int, default=256)
    serve.set_defaults(func=_cmd_serve)

    synth = sub.add_parser("synth", help="write a synthetic slide container")
    synth.add_argument("dest")
    synth.add_argument("--seed", type=int, default=42)
    synth.add_argument("--width", type=int, default=2048)
    synth.add_argument("--height", type=int, default=2048)
    synth.add_argument("--blobs", type=int, default=12)
    synth.set_defaults(func=_cmd_synth)

    imp = sub.add_parser("import-image",
                         help="build a container from a flat raster")
    imp.add_argument("source")
    imp.add_argument("dest")
    imp.add_argument("--magnification", type=float, default=40.0)
    imp.set_defaults(func=_cmd_import_image)

    run = sub.add_parser("run", help="execute one pipeline headless")
    run.add_argument("--pipeline", required=True)
    run.add_argument("--slide", required=True)
    run.add_argument("--models", required=True)
    run.add_argument("--out", default=None)
    run.set_defaults(func=_cmd_run)

    bench = sub.add_parser("bench", help="measurement harness")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    brun = bench_sub.add_parser("run", help="per-stage runtime benchmark")
    brun.add_argument("--pipeline", required=True)
    brun.add_argument("--slide", required=True)
    brun.add_argument("--models", required=True)
    brun.add_argument("--warmups", type=int, default=1)
    brun.add_argument("--runs", type=int, default=10)
    brun.add_argument("--out", default=None)
    brun.set_defaults(func=_cmd_bench_run)

    bmem = bench_sub.add_parser("memory", help="resident-memory scenario")
    bmem.add_argument("--scenario", default="zoom_pan",
                      choices=["startup", "open_slide", "zoom_pan"])
    bmem.add_argument("--seconds", type=float, default=150.0)
    bmem.add_argument("--budget-mb", type=int, default=256)
    bmem.add_argument("--extent", type=int, default=100_000)
    bmem.add_argument("--seed", type=int, default=42)
    bmem.add_argument("--paced", action="store_true")
    bmem.set_defaults(func=_cmd_bench_memory)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
