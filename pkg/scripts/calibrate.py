#!/usr/bin/env python3
"""Fit the shipped scenario library to the reference key rates.

Fiber, detector and receiver constants are shared by all six scenarios.
For each scenario the mean photon number ``mu`` is the single free
parameter: it is found by bisection on log(mu) so that the mean window
key rate of a short fit run matches the target.  The fitted files are
written to ``src/cowqkd/data/scenarios`` together with a ``[calibration]``
table recording target, fit value and procedure.

    python scripts/calibrate.py            # fit and write
    python scripts/calibrate.py --check    # full-length runs of the shipped files
"""
from __future__ import annotations

import argparse
import math
from pathlib import Path

from cowqkd.engine import run_scenario
from cowqkd.scenario import load_scenario, scenario_from_dict

DATA = Path(__file__).resolve().parents[1] / "src" / "cowqkd" / "data" / "scenarios"

SHARED = {
    "duration_s": 600.0,
    "window_s": 10.0,
    "rounds_per_window": 1_000_000,
    "channel": {"kappa_db_per_km": 0.35, "extra_loss_db": 3.0, "excess_noise_nu": 0.0},
    "receiver": {
        "t_B": 0.9,
        "visibility_V0": 0.98,
        "detector": {"eta": 0.1, "n_e": 0.0, "dark_count_prob": 1e-5, "dead_time_us": 50.0},
    },
    "metrics": {"f_ec": 1.16, "qber_abort": 0.12, "phase_abort": 0.12},
}

DECOY_F = 0.1
LEAK = 0.025

# (variant, distance_km, target keyrate_bps, seed)
TARGETS = [
    ("COW4", 1.0, 2000.0, 101),
    ("COW4", 2.0, 700.0, 102),
    ("COW4", 3.5, 400.0, 103),
    ("COW3", 1.0, 1150.0, 201),
    ("COW3", 2.0, 750.0, 202),
    ("COW3", 3.5, 650.0, 203),
]

FIT_DURATION_S = 60.0


def scenario_dict(variant: str, d_km: float, mu: float, seed: int) -> dict:
    return {
        "name": f"{variant.lower()}_{d_km:g}km",
        "seed": seed,
        "duration_s": SHARED["duration_s"],
        "window_s": SHARED["window_s"],
        "rounds_per_window": SHARED["rounds_per_window"],
        "protocol": {
            "variant": variant,
            "mu": mu,
            "decoy_fraction_f": DECOY_F if variant == "COW4" else 0.0,
            "extinction_leak": LEAK,
        },
        "channel": {**SHARED["channel"], "distance_km": d_km},
        "receiver": {**{k: v for k, v in SHARED["receiver"].items() if k != "detector"},
                     "detector": dict(SHARED["receiver"]["detector"])},
        "eve": {"enabled": False},
        "metrics": dict(SHARED["metrics"]),
    }


def keyrate(d: dict, duration_s: float) -> float:
    s = scenario_from_dict({**d, "duration_s": duration_s})
    return run_scenario(s).aggregate()["keyrate_mean"]


def fit_mu(variant, d_km, target, seed, lo=0.005, hi=2.0, iters=18) -> tuple:
    llo, lhi = math.log(lo), math.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        rate = keyrate(scenario_dict(variant, d_km, math.exp(mid), seed), FIT_DURATION_S)
        if rate < target:
            llo = mid
        else:
            lhi = mid
    mu = round(math.exp(0.5 * (llo + lhi)), 5)
    return mu, keyrate(scenario_dict(variant, d_km, mu, seed), FIT_DURATION_S)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_toml(d: dict, header: str = "") -> str:
    lines = [header] if header else []
    scalars = {k: v for k, v in d.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in d.items() if isinstance(v, dict)}
    lines += [f"{k} = {_toml_value(v)}" for k, v in scalars.items()]

    def emit(prefix, table):
        lines.append("")
        lines.append(f"[{prefix}]")
        subs = {}
        for k, v in table.items():
            if isinstance(v, dict):
                subs[k] = v
            else:
                lines.append(f"{k} = {_toml_value(v)}")
        for k, v in subs.items():
            emit(f"{prefix}.{k}", v)

    for k, v in tables.items():
        emit(k, v)
    return "\n".join(lines) + "\n"


def write_ideal():
    d = {
        "name": "ideal",
        "seed": 7,
        "duration_s": 20.0,
        "window_s": 10.0,
        "rounds_per_window": 200_000,
        "protocol": {"variant": "COW4", "mu": 0.5, "decoy_fraction_f": 0.1, "extinction_leak": 0.0},
        "channel": {"kappa_db_per_km": 0.2, "distance_km": 1.0, "extra_loss_db": 0.0, "excess_noise_nu": 0.0},
        "receiver": {"t_B": 0.9, "visibility_V0": 1.0,
                     "detector": {"eta": 0.5, "n_e": 0.0, "dark_count_prob": 0.0, "dead_time_us": 0.0}},
        "eve": {"enabled": False},
        "notes": "Noise-free limit: no dark counts, no leak, unit visibility, no eavesdropper.",
    }
    (DATA / "ideal.toml").write_text(to_toml(d, "# Zero-error reference scenario."))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--check", action="store_true", help="evaluate the shipped files instead of fitting")
    args = ap.parse_args()
    DATA.mkdir(parents=True, exist_ok=True)
    if args.check:
        for variant, d_km, target, _ in TARGETS:
            name = scenario_dict(variant, d_km, 0.1, 0)["name"]
            s = load_scenario(name)
            agg = run_scenario(s).aggregate()
            print(f"{name:12s} target {target:7.0f}  keyrate {agg['keyrate_mean']:8.1f}  "
                  f"({100 * (agg['keyrate_mean'] / target - 1):+5.1f}%)  qber {agg['qber_window_mean']:.4f}")
        return
    write_ideal()
    for variant, d_km, target, seed in TARGETS:
        mu, rate = fit_mu(variant, d_km, target, seed)
        d = scenario_dict(variant, d_km, mu, seed)
        d["calibration"] = {
            "fitted": "protocol.mu",
            "target_keyrate_bps": target,
            "fit_keyrate_bps": round(rate, 1),
            "fit_duration_s": FIT_DURATION_S,
            "method": "bisection on log(mu), all other constants shared (scripts/calibrate.py)",
        }
        header = (f"# {variant} over {d_km:g} km of dark fiber.\n"
                  "# mu is fitted to the reference key rate; see [calibration].")
        (DATA / f"{d['name']}.toml").write_text(to_toml(d, header))
        print(f"{d['name']:12s} mu={mu:.5f} keyrate={rate:.1f} (target {target:.0f})")


if __name__ == "__main__":
    main()
