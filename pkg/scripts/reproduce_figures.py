#!/usr/bin/env python3
"""Regenerate every shipped run and sweep as CSV tables.

    python scripts/reproduce_figures.py --out results/
    python scripts/reproduce_figures.py --out results/ --only fig5_power_vs_loss cow4_1km

Each scenario writes ``<name>/windows.csv`` and each sweep writes
``<name>/sweep.csv``; a ``summary.csv`` collects the per-scenario means.
Plotting is left to the reader's tool of choice.
"""
from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

from cowqkd.engine import run_scenario, run_sweep, sweep_to_csv
from cowqkd.metrics import windows_to_csv
from cowqkd.scenario import load_scenario, load_sweep, shipped_names


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--only", nargs="*", help="subset of scenario and sweep names")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    scenarios = [n for n in shipped_names("scenarios") if not args.only or n in args.only]
    sweeps = [n for n in shipped_names("sweeps") if not args.only or n in args.only]
    args.out.mkdir(parents=True, exist_ok=True)

    summary = []
    for name in scenarios:
        t0 = time.perf_counter()
        result = run_scenario(load_scenario(name), workers=args.workers, parallel=args.workers > 1)
        d = args.out / name
        d.mkdir(exist_ok=True)
        (d / "windows.csv").write_text(windows_to_csv(result.windows))
        agg = result.aggregate()
        summary.append({"scenario": name, "qber_window_mean": agg["qber_window_mean"],
                        "keyrate_mean": agg["keyrate_mean"], "abort_fraction": agg["abort_fraction"]})
        print(f"{name}: QBER {agg['qber_window_mean']:.4f}, {agg['keyrate_mean']:.1f} bit/s "
              f"({time.perf_counter() - t0:.0f} s)")

    if summary:
        with open(args.out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]))
            w.writeheader()
            w.writerows(summary)

    failed = 0
    for name in sweeps:
        t0 = time.perf_counter()
        spec = load_sweep(name)
        rows = run_sweep(spec, workers=args.workers)
        d = args.out / name
        d.mkdir(exist_ok=True)
        (d / "sweep.csv").write_text(sweep_to_csv(spec, rows))
        bad = sum(bool(r["error"]) for r in rows)
        failed += bad
        print(f"{name}: {len(rows)} cells, {bad} failed ({time.perf_counter() - t0:.0f} s)")
    return 3 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
