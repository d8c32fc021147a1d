"""Measurement harness: per-stage runtimes and resident-memory scenarios.

``run_benchmark`` launches a pipeline repeatedly (warmups discarded, then N
timed runs) and collects one per-patch-mean sample per stage per run.
``summarize`` reduces samples to mean and 95% confidence half-width using
the t distribution.  ``memory_scenario`` drives an open/zoom/pan workload
headless while sampling the process resident set.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .patchflow import STAGES

RSS_SAMPLE_PERIOD_S = 0.1
TRACE_STEPS_PER_SECOND = 4


@dataclass
class StageTimings:
    """Per-stage sample lists in ms (one sample per run) plus total run
    wall times in seconds."""

    samples: dict[str, list[float]] = field(
        default_factory=lambda: {stage: [] for stage in STAGES})
    totals: list[float] = field(default_factory=list)

    @property
    def num_runs(self) -> int:
        return len(self.totals)


@dataclass(frozen=True)
class StageSummary:
    mean_ms: float
    ci_half_width_ms: float


@dataclass(frozen=True)
class Summary:
    stages: dict[str, StageSummary]
    num_runs: int
    degenerate: bool  # single run: no spread to estimate, half-widths are 0


def run_benchmark(launcher, warmups: int, runs: int) -> StageTimings:
    """Execute ``launcher`` (a zero-argument callable returning a finished
    run result) ``warmups + runs`` times sequentially; keep samples from the
    timed runs only.  A failing run propagates and discards everything."""
    if warmups < 0 or runs < 1:
        raise ValueError("need warmups >= 0 and runs >= 1")
    for _ in range(warmups):
        launcher()
    timings = StageTimings()
    for _ in range(runs):
        started = time.perf_counter()
        result = launcher()
        timings.totals.append(time.perf_counter() - started)
        for stage in STAGES:
            timings.samples[stage].append(result.timings.mean_ms(stage))
    return timings


def mean_and_ci(samples: list[float]) -> tuple[float, float]:
    """Mean and t-based 95% half-width (sample std, n - 1 denominator);
    half-width is 0 for a single sample."""
    n = len(samples)
    mean = sum(samples) / n
    if n < 2:
        return mean, 0.0
    variance = sum((x - mean) ** 2 for x in samples) / (n - 1)
    from scipy import stats  # deferred: keeps memory scenarios lean

    quantile = stats.t.ppf(0.975, n - 1)
    return mean, quantile * math.sqrt(variance) / math.sqrt(n)


def summarize(t: StageTimings) -> Summary:
    if t.num_runs < 1:
        raise ValueError("need at least one run")
    stages = {}
    for stage in STAGES:
        mean, half = mean_and_ci(t.samples[stage])
        stages[stage] = StageSummary(mean, half)
    return Summary(stages=stages, num_runs=t.num_runs,
                   degenerate=t.num_runs == 1)


def export_samples_csv(t: StageTimings, path: str | Path) -> None:
    """Raw samples, one row per (run, stage), for offline statistics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "stage", "sample_ms"])
        for run in range(t.num_runs):
            for stage in STAGES:
                writer.writerow([run, stage, f"{t.samples[stage][run]:.6f}"])


# -- memory scenarios -------------------------------------------------------


class MemorySamplingUnsupported(RuntimeError):
    """The platform provides no resident-set probe."""


@dataclass(frozen=True)
class MemoryReport:
    scenario: str
    peak_rss: int
    final_rss: int
    rss_samples: int
    tile_loads: int
    steps: int


class _RssSampler:
    def __init__(self):
        try:
            import psutil
        except ImportError as exc:
            raise MemorySamplingUnsupported(
                "psutil unavailable; cannot sample resident set"
            ) from exc
        self._process = psutil.Process()
        self.peak = 0
        self.count = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def _sample(self) -> int:
        rss = self._process.memory_info().rss
        self.peak = max(self.peak, rss)
        self.count += 1
        return rss

    def _loop(self):
        while not self._stop.is_set():
            self._sample()
            self._stop.wait(RSS_SAMPLE_PERIOD_S)

    def __enter__(self):
        self._sample()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.final = self._sample()
        return False


def trace_viewport(step: int, slide_width: int, slide_height: int,
                   out_width: int = 1024, out_height: int = 768):
    """Deterministic zoom-and-pan path: the zoom breathes between the whole
    slide and near-native resolution while the center sweeps a closed
    curve.  Pure function of the step index."""
    from .tilecache import Viewport

    zoom = 5.5 * (0.5 - 0.5 * math.cos(step * 0.02))
    view_width = slide_width * 2.0 ** -zoom
    cx = slide_width * (0.5 + 0.3 * math.sin(step * 0.05))
    cy = slide_height * (0.5 + 0.3 * math.cos(step * 0.037))
    return Viewport(center_x=cx, center_y=cy, view_width_l0=view_width,
                    out_width_px=out_width, out_height_px=out_height)


def _open_viewing_stack(budget_bytes: int, slide_extent: int, seed: int):
    from .synthetic import SyntheticPyramid
    from .tilecache import TileCache

    slide = SyntheticPyramid(seed, slide_extent, slide_extent)
    cache = TileCache(slide, max_bytes=budget_bytes)
    cache.preload_lowest_level()
    return slide, cache


def memory_scenario(scenario: str, seconds: float = 150.0,
                    budget_bytes: int = 256 * 2**20,
                    slide_extent: int = 100_000, seed: int = 42,
                    paced: bool = False) -> MemoryReport:
    """Run one headless viewing scenario and report resident-set peak/final.

    ``zoom_pan`` replays ``seconds * 4`` trace steps; ``paced`` sleeps to
    real time, the default replays as fast as possible (the trace, and so
    the tile workload, is identical either way).
    """
    if scenario not in ("startup", "open_slide", "zoom_pan"):
        raise ValueError(f"unknown scenario {scenario!r}")
    steps = 0
    tile_loads = 0
    with _RssSampler() as sampler:
        if scenario == "startup":
            time.sleep(0.5)
        else:
            slide, cache = _open_viewing_stack(budget_bytes, slide_extent, seed)
            if scenario == "zoom_pan":
                steps = int(seconds * TRACE_STEPS_PER_SECOND)
                step_budget = 1.0 / TRACE_STEPS_PER_SECOND
                for step in range(steps):
                    started = time.perf_counter()
                    v = trace_viewport(step, slide.width, slide.height)
                    for key in cache.tiles_for_viewport(v):
                        cache.resolve_with_fallback(key)
                    cache.process_pending()
                    if paced:
                        remaining = step_budget - (time.perf_counter() - started)
                        if remaining > 0:
                            time.sleep(remaining)
            tile_loads = cache.stats().misses
    return MemoryReport(scenario=scenario, peak_rss=sampler.peak,
                        final_rss=sampler.final, rss_samples=sampler.count,
                        tile_loads=tile_loads, steps=steps)
