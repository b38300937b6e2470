"""Round-level simulation driver: windows, blocks, scenarios and sweeps.

Randomness comes from a Philox4x64 counter-based stream keyed by the
scenario seed.  Round ``i`` always consumes uniforms ``[12 i, 12 i + 12)``,
so any block of rounds can be simulated independently and the blocks merge
into exactly the sequential result (up to detector dead time, which is
reset at block starts).

Only ``rounds_per_window`` rounds are simulated per integration window;
they are laid out contiguously from the window start at the real slot
timing.  Gains are per-round ratios, so the per-second key rate is the
per-round rate times ``pair_rate_hz``.
"""
from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .channel import (
    ChannelModel, EveModel, effective_mu, effective_visibility, flip_probability, link_budget,
)
from .detection import (
    Line, NO_CLICK, DataClick, MonitorClick, ReceiverConfig, RoundOutcome,
    apply_dead_time, data_clicks, m1_probability, monitor_clicks, route_from_uniform,
)
from .encoding import ProtocolConfig, Symbol, light_slots, symbols_from_uniform
from .metrics import GainTally, MetricsConfig, MetricsWindow, tally_arrays, window_metrics

UNIFORMS_PER_ROUND = 12
# Philox4x64 emits 4 uint64 per counter step
_COUNTER_STEPS_PER_ROUND = UNIFORMS_PER_ROUND // 4
CHUNK_ROUNDS = 1 << 18
RNG_NAME = "numpy.random.Philox (Philox4x64-10), key=seed, 12 uniforms per round"

# detector labels for the dead-time filter
DET_T, DET_M0, DET_M1 = 0, 1, 2


@dataclass(frozen=True)
class Scenario:
    name: str
    protocol: ProtocolConfig
    channel: ChannelModel
    receiver: ReceiverConfig
    eve: EveModel = EveModel()
    duration_s: float = 60.0
    seed: int = 0
    window_s: float = 10.0
    rounds_per_window: Optional[int] = 1_000_000
    metrics: MetricsConfig = MetricsConfig()

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be > 0, got {self.duration_s}")
        if not self.window_s > 0:
            raise ValueError(f"window_s must be > 0, got {self.window_s}")
        if self.rounds_per_window is not None and self.rounds_per_window < 1:
            raise ValueError("rounds_per_window must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def window_lengths(self) -> list[float]:
        n_full = int(math.floor(self.duration_s / self.window_s + 1e-9))
        lengths = [self.window_s] * n_full
        rest = self.duration_s - n_full * self.window_s
        if rest > 1e-9 * self.window_s:
            lengths.append(rest)
        return lengths

    def rounds_in_window(self, length_s: float) -> int:
        real = int(round(self.protocol.pair_rate_hz * length_s))
        if self.rounds_per_window is None:
            return max(real, 1)
        return max(min(real, self.rounds_per_window), 1)

    @property
    def window_bounds(self) -> np.ndarray:
        """Cumulative simulated-round boundaries, length n_windows + 1."""
        counts = [self.rounds_in_window(length) for length in self.window_lengths]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def total_rounds(self) -> int:
        return int(self.window_bounds[-1])

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed % 2**64)


@dataclass
class BlockResult:
    start: int
    stop: int
    window_tallies: dict = field(default_factory=dict)
    log: Optional[list] = None


@dataclass
class RunResult:
    scenario: Scenario
    windows: list
    tally: GainTally
    window_tallies: list
    summary: dict
    log: Optional[list] = None

    def aggregate(self) -> dict:
        return aggregate_windows([self])


def _generator(seed: int, round_start: int) -> np.random.Generator:
    bg = np.random.Philox(key=seed)
    if round_start:
        bg.advance(round_start * _COUNTER_STEPS_PER_ROUND)
    return np.random.Generator(bg)


class _Physics:
    """Per-scenario constants used by the vectorized round kernel."""

    def __init__(self, s: Scenario):
        p, ch, rx, eve = s.protocol, s.channel, s.receiver, s.eve
        self.f = p.decoy_fraction_f
        self.mu_eff = effective_mu(p, ch, eve)
        self.leak = self.mu_eff * p.extinction_leak
        self.visibility = effective_visibility(rx.visibility_V0, eve)
        self.p_flip = flip_probability(eve)
        self.t_B = rx.t_B
        self.eta = rx.detector.eta
        self.false_click = min(rx.detector.dark_count_prob + ch.noise_click_prob, 1.0)
        self.dead_time_us = rx.detector.dead_time_us
        self.slot_s = p.slot_period_s

    def rounds(self, U: np.ndarray, prev_late: bool):
        sym = symbols_from_uniform(U[:, 0], self.f)
        early, late = light_slots(sym)
        mu_early = np.where(early, self.mu_eff, self.leak)
        mu_late = np.where(late, self.mu_eff, self.leak)
        routed = route_from_uniform(U[:, 1], self.t_B)

        slot = data_clicks(
            mu_early, mu_late, self.eta, self.false_click, self.p_flip,
            U[:, 2], U[:, 3], U[:, 4], U[:, 5],
        )
        slot[routed != Line.DATA] = NO_CLICK

        prev = np.empty_like(late)
        prev[0] = prev_late
        prev[1:] = late[:-1]
        interfered = (sym == Symbol.DECOY) | (prev & early)
        mean = np.where(interfered, 2.0 * self.mu_eff, mu_early + mu_late)
        det = monitor_clicks(
            mean, m1_probability(interfered, self.visibility), self.eta, self.false_click,
            U[:, 6], U[:, 7], U[:, 8], U[:, 9], U[:, 10],
        )
        det[routed != Line.MONITOR] = NO_CLICK
        return sym, routed, slot, det, interfered


def simulate_block(
    s: Scenario,
    start: int,
    stop: int,
    record_log: bool = False,
) -> BlockResult:
    """Simulate simulated-round indices ``[start, stop)`` of a scenario.

    The dead-time filter starts fresh at ``start``: the first click of the
    block is always accepted.
    """
    bounds = s.window_bounds
    if not 0 <= start <= stop <= bounds[-1]:
        raise ValueError(f"block [{start}, {stop}) outside [0, {bounds[-1]})")
    phys = _Physics(s)
    lengths = s.window_lengths
    starts_s = np.concatenate([[0.0], np.cumsum(lengths)])
    gen = _generator(s.seed, max(start - 1, 0))
    prev_late = False
    if start > 0:
        u_prev = gen.random((1, UNIFORMS_PER_ROUND))
        prev_late = bool(light_slots(symbols_from_uniform(u_prev[:, 0], phys.f))[1][0])

    dead_state: dict = {}
    result = BlockResult(start, stop, {}, [] if record_log else None)
    w = int(np.searchsorted(bounds, start, side="right") - 1)
    pos = start
    while pos < stop:
        w_end = int(bounds[w + 1])
        c_end = min(stop, w_end, pos + CHUNK_ROUNDS)
        n = c_end - pos
        U = gen.random((n, UNIFORMS_PER_ROUND))
        sym, routed, slot, det, interfered = phys.rounds(U, prev_late)
        prev_late = bool(sym[-1] != Symbol.BIT1)

        if phys.dead_time_us > 0:
            local = np.arange(pos - bounds[w], c_end - bounds[w], dtype=np.float64)
            t_round = starts_s[w] + 2.0 * local * phys.slot_s
            d_idx = np.flatnonzero(slot >= 0)
            keep = apply_dead_time(
                t_round[d_idx] + (1.0 + slot[d_idx]) * phys.slot_s, phys.dead_time_us,
                np.full(d_idx.size, DET_T), dead_state,
            )
            slot[d_idx[~keep]] = NO_CLICK
            m_idx = np.flatnonzero(det >= 0)
            keep = apply_dead_time(
                t_round[m_idx] + 2.0 * phys.slot_s, phys.dead_time_us,
                DET_M0 + det[m_idx], dead_state,
            )
            det[m_idx[~keep]] = NO_CLICK

        t = tally_arrays(sym, routed, slot, det, interfered)
        if w in result.window_tallies:
            result.window_tallies[w] = result.window_tallies[w] + t
        else:
            result.window_tallies[w] = t
        if record_log:
            result.log.extend(_outcomes(pos, sym, routed, slot, det, interfered))
        pos = c_end
        if pos == w_end:
            w += 1
    return result


def _outcomes(start, sym, routed, slot, det, interfered) -> list:
    out = []
    for k in range(sym.size):
        out.append(RoundOutcome(
            round_index=start + k + 1,
            sent=Symbol(int(sym[k])),
            routed=Line(int(routed[k])),
            data_click=None if slot[k] < 0 else DataClick(int(slot[k])),
            monitor_click=None if det[k] < 0 else MonitorClick(int(det[k])),
            interfered=bool(interfered[k]),
        ))
    return out


def merge_parallel(blocks: Sequence[BlockResult]) -> BlockResult:
    """Combine blocks over disjoint round ranges into one result."""
    ordered = sorted(blocks, key=lambda b: (b.start, b.stop))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.stop:
            raise ValueError(f"overlapping blocks [{a.start}, {a.stop}) and [{b.start}, {b.stop})")
    if not ordered:
        raise ValueError("nothing to merge")
    merged = BlockResult(ordered[0].start, ordered[-1].stop, {}, None)
    if all(b.log is not None for b in ordered):
        merged.log = [o for b in ordered for o in b.log]
    for b in ordered:
        for w, t in b.window_tallies.items():
            merged.window_tallies[w] = merged.window_tallies[w] + t if w in merged.window_tallies else t.copy()
    return merged


def _block_task(args):
    s, start, stop, record_log = args
    return simulate_block(s, start, stop, record_log)


def block_ranges(s: Scenario, block_rounds: Optional[int]) -> list:
    bounds = s.window_bounds
    if block_rounds is None:
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    edges = list(range(0, int(bounds[-1]), block_rounds)) + [int(bounds[-1])]
    return list(zip(edges[:-1], edges[1:]))


def run_scenario(
    s: Scenario,
    workers: int = 1,
    block_rounds: Optional[int] = None,
    record_log: bool = False,
    parallel: bool = False,
) -> RunResult:
    """Simulate a scenario and evaluate every integration window.

    ``parallel=False`` runs one sequential block (dead-time state carried
    across windows).  Otherwise the rounds are split into blocks
    (``block_rounds``, default one per window) that run on ``workers``
    processes and are merged.
    """
    t0 = time.perf_counter()
    total = s.total_rounds
    if not parallel:
        merged = simulate_block(s, 0, total, record_log)
    else:
        tasks = [(s, a, b, record_log) for a, b in block_ranges(s, block_rounds)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                blocks = list(ex.map(_block_task, tasks))
        else:
            blocks = [_block_task(t) for t in tasks]
        merged = merge_parallel(blocks)
    return finalize(s, merged, time.perf_counter() - t0)


def finalize(s: Scenario, merged: BlockResult, elapsed_s: float = 0.0) -> RunResult:
    lengths = s.window_lengths
    starts = np.concatenate([[0.0], np.cumsum(lengths)])
    window_tallies = [merged.window_tallies.get(w, GainTally()) for w in range(len(lengths))]
    windows = []
    total = GainTally()
    for w, t in enumerate(window_tallies):
        t.check()
        total = total + t
        windows.append(window_metrics(
            t, s.protocol.mu, s.protocol.pair_rate_hz, s.metrics, float(starts[w]), float(lengths[w]),
        ))
    real_rounds = sum(int(round(s.protocol.pair_rate_hz * length)) for length in lengths)
    summary = {
        "rounds_simulated": total.rounds_total,
        "rounds_real": real_rounds,
        "time_dilation": real_rounds / max(total.rounds_total, 1),
        "data_clicks": total.data_clicks,
        "monitor_clicks": total.monitor_clicks,
        "elapsed_s": elapsed_s,
    }
    return RunResult(s, windows, total, window_tallies, summary, merged.log)


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def _std(xs):
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else (0.0 if len(xs) else None)


def aggregate_windows(runs: Sequence[RunResult]) -> dict:
    """Replicate aggregate: mean and standard deviation across runs.

    Each replicate contributes its pooled QBER (all windows' clicks) and
    its mean window key rate.  ``qber_mean_kept`` averages the windowed
    QBER over non-aborted windows only.
    """
    from .metrics import qber_z

    rep_qber = [q for q in (qber_z(r.tally) for r in runs) if q is not None]
    rep_rate = [float(np.mean([w.keyrate_bps for w in r.windows])) for r in runs]
    all_windows = [w for r in runs for w in r.windows]
    kept = [w.qber for w in all_windows if not w.aborted and w.qber is not None]
    windowed = [w.qber for w in all_windows if w.qber is not None]
    return {
        "qber_mean": _mean(rep_qber),
        "qber_std": _std(rep_qber),
        "qber_window_mean": _mean(windowed),
        "qber_mean_kept": _mean(kept),
        "keyrate_mean": _mean(rep_rate),
        "keyrate_std": _std(rep_rate),
        "abort_fraction": sum(w.aborted for w in all_windows) / max(len(all_windows), 1),
        "replicates": len(runs),
    }


def run_metadata(s: Scenario, result: RunResult) -> dict:
    from .scenario import scenario_to_dict

    return {
        "code_version": __version__,
        "rng": RNG_NAME,
        "seed": s.seed,
        "scenario": scenario_to_dict(s),
        "link_budget": link_budget(s.channel, s.receiver.detector),
        "effective_mu": effective_mu(s.protocol, s.channel, s.eve),
        "summary": result.summary,
        "aggregate": result.aggregate(),
        "rate_scaling": "keyrate_bps = secret bits per simulated round * pair_rate_hz",
    }


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepSpec:
    """A one- or two-axis grid over dotted scenario fields.

    ``base`` is the raw scenario mapping; axis values are written into it
    before the scenario is built, so derived fields (``mu`` from
    ``tx_power_dbm``) follow the swept value.
    """

    name: str
    base: dict
    axis1: tuple
    axis2: Optional[tuple] = None
    replicates: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for axis in (self.axis1, self.axis2):
            if axis is None:
                continue
            path, values = axis
            if not values:
                raise ValueError(f"axis {path!r} has no values")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ValueError(f"axis {path!r} values must be numeric")

    def cells(self) -> list:
        vals1 = list(self.axis1[1])
        vals2 = list(self.axis2[1]) if self.axis2 else [None]
        return [(v1, v2) for v1 in vals1 for v2 in vals2]


def _resolve(d: dict, path: str):
    """Parent table and leaf key of a dotted path; missing tables are created."""
    node = d
    parts = path.split(".")
    for p in parts[:-1]:
        if p not in node:
            node[p] = {}
        if not isinstance(node[p], dict):
            raise KeyError(f"sweep path {path!r} does not resolve")
        node = node[p]
    return node, parts[-1]


def set_path(d: dict, path: str, value) -> dict:
    out = copy.deepcopy(d)
    node, leaf = _resolve(out, path)
    node[leaf] = value
    return out


def cell_scenario(spec: SweepSpec, v1, v2) -> dict:
    raw = set_path(spec.base, spec.axis1[0], v1)
    if spec.axis2 is not None:
        raw = set_path(raw, spec.axis2[0], v2)
    return raw


def replicate_seed(seed: int, r: int) -> int:
    """Replicate ``r`` of every cell uses the same seed (common random numbers)."""
    return (seed + r) % 2**64


def _cell_task(args):
    from .scenario import scenario_from_dict

    spec, index, v1, v2 = args
    row = {"cell": index, spec.axis1[0]: v1}
    if spec.axis2 is not None:
        row[spec.axis2[0]] = v2
    try:
        s = scenario_from_dict(cell_scenario(spec, v1, v2))
        runs = [run_scenario(s.with_seed(replicate_seed(s.seed, r))) for r in range(spec.replicates)]
        row.update(aggregate_windows(runs))
        row["error"] = ""
    except Exception as exc:  # per-cell failures are recorded, the sweep continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(spec: SweepSpec, workers: int = 1) -> list:
    tasks = [(spec, i, v1, v2) for i, (v1, v2) in enumerate(spec.cells())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_cell_task, tasks))
    return [_cell_task(t) for t in tasks]


SWEEP_STAT_COLUMNS = (
    "qber_mean", "qber_std", "qber_window_mean", "qber_mean_kept",
    "keyrate_mean", "keyrate_std", "abort_fraction", "replicates", "error",
)


def sweep_columns(spec: SweepSpec) -> list:
    cols = ["cell", spec.axis1[0]]
    if spec.axis2 is not None:
        cols.append(spec.axis2[0])
    return cols + list(SWEEP_STAT_COLUMNS)


def sweep_to_csv(spec: SweepSpec, rows: list) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = sweep_columns(spec)
    w.writerow(cols)
    for row in rows:
        w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])
    return buf.getvalue()
