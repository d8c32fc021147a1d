#!/usr/bin/env python3
"""Resident-memory profile of the headless viewing scenarios.

Each scenario (startup, open_slide, zoom_pan) runs in its own subprocess so
peak RSS starts from a clean interpreter, then the collected reports print
as one table.

    python3 scripts/memory_profile.py --budget-mb 256 --seconds 150
"""

import argparse
import json
import subprocess
import sys

SCENARIOS = ("startup", "open_slide", "zoom_pan")


def run_scenario(name: str, args) -> dict:
    cmd = [sys.executable, "-m", "pyraflow.cli", "bench", "memory",
           "--scenario", name,
           "--seconds", str(args.seconds),
           "--budget-mb", str(args.budget_mb),
           "--extent", str(args.extent),
           "--seed", str(args.seed)]
    if args.paced:
        cmd.append("--paced")
    out = subprocess.run(cmd, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=150.0,
                    help="trace duration for zoom_pan")
    ap.add_argument("--budget-mb", type=int, default=256)
    ap.add_argument("--extent", type=int, default=100_000,
                    help="virtual slide width and height")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--paced", action="store_true",
                    help="replay the trace in real time instead of flat out")
    ap.add_argument("--json", dest="json_out", default=None,
                    help="also write the raw reports to this file")
    args = ap.parse_args()

    reports = []
    print(f"{'scenario':12s} {'peak MB':>9s} {'final MB':>9s} "
          f"{'tile loads':>11s} {'steps':>6s}")
    for name in SCENARIOS:
        report = run_scenario(name, args)
        reports.append(report)
        print(f"{name:12s} {report['peak_rss'] / 2**20:9.1f} "
              f"{report['final_rss'] / 2**20:9.1f} "
              f"{report['tile_loads']:11d} {report['steps']:6d}")
    bound = (args.budget_mb + 512) * 2**20
    worst = max(r["peak_rss"] for r in reports)
    print(f"worst peak {worst / 2**20:.1f} MB vs bound "
          f"{bound / 2**20:.0f} MB (budget + 512 MB overhead)")
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(reports, fh, indent=2)
        print(f"reports -> {args.json_out}")
    return 0 if worst <= bound else 1


if __name__ == "__main__":
    raise SystemExit(main())
