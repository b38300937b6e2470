"""Gain bookkeeping and the asymptotic COW key-rate estimators.

Counters are kept as integers; every gain ``J`` is a counter divided by
the number of rounds.  Ratios (E_z, E_x, E_p^u) are evaluated directly on
counters since the common 1/K factor cancels.

Index conventions
-----------------
``data[w, j]``     sent Bit``w`` (0_z / 1_z), click in slot ``j`` (T0 early, T1 late)
``monitor[u, i]``  pattern ``u`` in (0a, a0, aa, 00), detector M``i``

Bit0 puts light in the late slot, so its correct click is T1 and
``data[0, 0] + data[1, 1]`` are the errors.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .detection import DataClick, Line, MonitorClick, RoundOutcome
from .encoding import Symbol, normalization_factors

PATTERNS = ("0a", "a0", "aa", "00")
U_0A, U_A0, U_AA, U_00 = range(4)

WINDOW_CSV_HEADER = ("t_start_s", "window_s", "qber", "ex", "ep_u", "keyrate_bps", "aborted")

# cancellation below this many ulps of the operands counts as exact zero
_CANCEL_ULPS = 8


@dataclass
class GainTally:
    rounds_total: int = 0
    data: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    data_decoy: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    monitor: np.ndarray = field(default_factory=lambda: np.zeros((4, 2), dtype=np.int64))
    routed_data: int = 0
    routed_monitor: int = 0

    def copy(self) -> "GainTally":
        return GainTally(
            self.rounds_total, self.data.copy(), self.data_decoy.copy(),
            self.monitor.copy(), self.routed_data, self.routed_monitor,
        )

    def merge(self, other: "GainTally") -> "GainTally":
        return GainTally(
            self.rounds_total + other.rounds_total,
            self.data + other.data,
            self.data_decoy + other.data_decoy,
            self.monitor + other.monitor,
            self.routed_data + other.routed_data,
            self.routed_monitor + other.routed_monitor,
        )

    __add__ = merge

    def __eq__(self, other) -> bool:
        if not isinstance(other, GainTally):
            return NotImplemented
        return (
            self.rounds_total == other.rounds_total
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.data_decoy, other.data_decoy)
            and np.array_equal(self.monitor, other.monitor)
            and self.routed_data == other.routed_data
            and self.routed_monitor == other.routed_monitor
        )

    @property
    def data_clicks(self) -> int:
        return int(self.data.sum() + self.data_decoy.sum())

    @property
    def monitor_clicks(self) -> int:
        return int(self.monitor.sum())

    def gains(self) -> dict:
        """All gains as per-round probabilities."""
        if self.rounds_total <= 0:
            raise ValueError("empty tally")
        k = float(self.rounds_total)
        out = {}
        for w, wname in enumerate(("0z", "1z")):
            for j in range(2):
                out[f"J_{wname}^T{j}"] = self.data[w, j] / k
        for u, uname in enumerate(PATTERNS):
            for i in range(2):
                out[f"J_{uname}^M{i}"] = self.monitor[u, i] / k
        return out

    def check(self) -> None:
        for arr in (self.data, self.data_decoy, self.monitor):
            if np.any(arr < 0) or np.any(arr > self.rounds_total):
                raise AssertionError("counter outside [0, rounds_total]")
        if self.data_clicks > self.routed_data or self.monitor_clicks > self.routed_monitor:
            raise AssertionError("more clicks than routed rounds")
        if self.routed_data + self.routed_monitor != self.rounds_total:
            raise AssertionError("routing counts do not add up")

    def to_dict(self) -> dict:
        return {
            "rounds_total": self.rounds_total,
            "data": self.data.tolist(),
            "data_decoy": self.data_decoy.tolist(),
            "monitor": self.monitor.tolist(),
            "routed_data": self.routed_data,
            "routed_monitor": self.routed_monitor,
        }


def monitor_pattern(sent: Symbol, interfered: bool) -> int:
    if interfered or sent == Symbol.DECOY:
        return U_AA
    return U_0A if sent == Symbol.BIT0 else U_A0


def tally_round(tally: GainTally, outcome: RoundOutcome) -> GainTally:
    """Add one round to ``tally`` in place and return it."""
    tally.rounds_total += 1
    if outcome.routed is Line.DATA:
        tally.routed_data += 1
    else:
        tally.routed_monitor += 1
    if outcome.data_click is not None:
        j = int(outcome.data_click)
        if outcome.sent == Symbol.DECOY:
            tally.data_decoy[j] += 1
        else:
            tally.data[int(outcome.sent), j] += 1
    if outcome.monitor_click is not None:
        tally.monitor[monitor_pattern(outcome.sent, outcome.interfered), int(outcome.monitor_click)] += 1
    return tally


def tally_arrays(
    symbols: np.ndarray,
    routed: np.ndarray,
    data_slot: np.ndarray,
    monitor_det: np.ndarray,
    interfered: np.ndarray,
) -> GainTally:
    """Vectorized ``tally_round`` over a block of rounds."""
    symbols = np.asarray(symbols)
    n = symbols.size
    t = GainTally(rounds_total=n)
    t.routed_data = int(np.count_nonzero(routed == Line.DATA))
    t.routed_monitor = n - t.routed_data

    hit = data_slot >= 0
    decoy = symbols == Symbol.DECOY
    zsel = hit & ~decoy
    t.data = np.bincount(
        symbols[zsel].astype(np.int64) * 2 + data_slot[zsel], minlength=4
    ).reshape(2, 2).astype(np.int64)
    t.data_decoy = np.bincount(data_slot[hit & decoy].astype(np.int64), minlength=2).astype(np.int64)

    mhit = monitor_det >= 0
    pattern = np.where(
        interfered | decoy, U_AA, np.where(symbols == Symbol.BIT0, U_0A, U_A0)
    ).astype(np.int64)
    t.monitor = np.bincount(pattern[mhit] * 2 + monitor_det[mhit], minlength=8).reshape(4, 2).astype(np.int64)
    return t


def gain_jz(tally: GainTally) -> float:
    """``J_z = (J_0z^T0 + J_0z^T1 + J_1z^T0 + J_1z^T1) / 2``."""
    if tally.rounds_total <= 0:
        raise ValueError("gain of an empty tally is undefined")
    return float(tally.data.sum()) / (2.0 * tally.rounds_total)


def qber_z(tally: GainTally) -> Optional[float]:
    """Wrong-slot clicks over all Z-round data clicks; None without clicks."""
    total = int(tally.data.sum())
    if total == 0:
        return None
    wrong = int(tally.data[0, DataClick.T0] + tally.data[1, DataClick.T1])
    return wrong / total


def _monitor_sums(tally: GainTally) -> tuple[float, float]:
    """``2 (t_0z^Mi + t_1z^Mi)`` for i = 0, 1 (counter scale)."""
    g0 = 2.0 * float(tally.monitor[U_0A, 0] + tally.monitor[U_A0, 0])
    g1 = 2.0 * float(tally.monitor[U_0A, 1] + tally.monitor[U_A0, 1])
    return g0, g1


def coherent_error_fraction(tally: GainTally) -> Optional[float]:
    """M1 share of monitor clicks on interfering (aa) rounds."""
    n = int(tally.monitor[U_AA].sum())
    if n == 0:
        return None
    return int(tally.monitor[U_AA, 1]) / n


def _weighted_x_gain(g0: float, g1: float, q: float) -> float:
    """``N+ J_0x`` (counter scale) from the z-monitor sums and error fraction.

    Assumes |0_x> and |1_x> exit the wrong port with the same probability
    ``q`` measured on the coherent rounds; combined with the constraint
    ``N+ J_0x^Mi + N- J_1x^Mi = 2 (J_0z^Mi + J_1z^Mi)`` this fixes the
    split between the two X states.
    """
    total = g0 + g1
    denom = 1.0 - 2.0 * q
    if abs(denom) < 1e-12:
        return total / 2.0
    a = (total + (g0 - g1) / denom) / 2.0
    return min(max(a, 0.0), total)


def x_basis_gains(tally: GainTally, nf: tuple[float, float]) -> Optional[dict]:
    """Point estimates of the X-basis gains J_0x^Mi, J_1x^Mi.

    Returns None when there are no coherent-round clicks to calibrate on.
    """
    q = coherent_error_fraction(tally)
    if q is None or tally.rounds_total == 0:
        return None
    n_plus, n_minus = nf
    g0, g1 = _monitor_sums(tally)
    a = _weighted_x_gain(g0, g1, q)
    b = (g0 + g1) - a
    k = float(tally.rounds_total)
    out = {
        "J_0x^M0": (1.0 - q) * a / (n_plus * k),
        "J_0x^M1": q * a / (n_plus * k),
    }
    if n_minus > 0:
        out["J_1x^M0"] = q * b / (n_minus * k)
        out["J_1x^M1"] = (1.0 - q) * b / (n_minus * k)
    return out


def _x_error_from_weighted(g0: float, g1: float, w_m1: float, w_m0: float) -> Optional[float]:
    denom = g0 + g1
    if denom <= 0:
        return None
    numer = w_m1 + (g0 - w_m0)
    scale = max(abs(w_m1), abs(g0), abs(w_m0))
    if abs(numer) <= _CANCEL_ULPS * np.finfo(float).eps * scale:
        numer = 0.0
    return min(max(numer / denom, 0.0), 1.0)


def error_x(tally: GainTally, nf: tuple[float, float]) -> Optional[float]:
    """X-basis bit error rate on the monitoring line.

    ``E_x = [N+ J_0x^M1 + 2(J_0z^M0 + J_1z^M0) - N+ J_0x^M0]
    / [2 (J_0z^M0 + J_0z^M1 + J_1z^M0 + J_1z^M1)]``
    with J_0z^Mi = J_0a^Mi and J_1z^Mi = J_a0^Mi.  The X gains come from
    ``x_basis_gains``.  Returns None if any denominator is empty.
    """
    q = coherent_error_fraction(tally)
    if q is None:
        return None
    g0, g1 = _monitor_sums(tally)
    a = _weighted_x_gain(g0, g1, q)
    return _x_error_from_weighted(g0, g1, q * a, (1.0 - q) * a)


@dataclass(frozen=True)
class BoundEstimate:
    j0x_m1_upper: float
    j0x_m0_lower: float

    def __post_init__(self):
        for v in (self.j0x_m1_upper, self.j0x_m0_lower):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"bound {v} outside [0, 1]")


def estimate_bounds(tally: GainTally, nf: tuple[float, float], sigma: float = 0.0) -> Optional[BoundEstimate]:
    """Default X-gain bounds from the coherent (aa) monitor rounds.

    In the asymptotic limit (``sigma=0``) the bounds are the point
    estimates.  ``sigma > 0`` widens the wrong-port fraction by that many
    binomial standard errors before converting to gains.
    """
    q = coherent_error_fraction(tally)
    if q is None:
        return None
    n = int(tally.monitor[U_AA].sum())
    q_up = min(1.0, q + sigma * math.sqrt(q * (1.0 - q) / n)) if sigma > 0 else q
    g0, g1 = _monitor_sums(tally)
    a = _weighted_x_gain(g0, g1, q)
    scale = nf[0] * float(tally.rounds_total)
    return BoundEstimate(
        j0x_m1_upper=min(1.0, q_up * a / scale),
        j0x_m0_lower=min(1.0, (1.0 - q_up) * a / scale),
    )


def phase_error_upper(tally: GainTally, bounds: BoundEstimate, nf: tuple[float, float]) -> Optional[float]:
    """Phase-error upper bound: E_x's expression with the bounded X gains."""
    g0, g1 = _monitor_sums(tally)
    k = float(tally.rounds_total)
    n_plus = nf[0]
    return _x_error_from_weighted(g0, g1, n_plus * bounds.j0x_m1_upper * k, n_plus * bounds.j0x_m0_lower * k)


def binary_entropy(a: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"probability out of range: {a}")
    if a == 0.0 or a == 1.0:
        return 0.0
    return -a * math.log2(a) - (1.0 - a) * math.log2(1.0 - a)


def secret_key_rate(J: float, ep_u: float, eb: float, f_ec: float = 1.16) -> float:
    """Asymptotic secret bits per round, ``J [1 - h(E_p^u) - f h(E_b)]``, floored at 0."""
    if f_ec < 1.0:
        raise ValueError(f"error-correction efficiency must be >= 1, got {f_ec}")
    bracket = 1.0 - binary_entropy(ep_u) - f_ec * binary_entropy(eb)
    return J * bracket if bracket > 0 else 0.0


def keyrate_bps(V: float, pair_rate_hz: float) -> float:
    if V < 0:
        raise ValueError("negative key rate")
    return V * pair_rate_hz


@dataclass(frozen=True)
class MetricsConfig:
    f_ec: float = 1.16
    qber_abort: float = 0.12
    phase_abort: float = 0.12
    bound_sigma: float = 0.0

    def __post_init__(self):
        if self.f_ec < 1.0:
            raise ValueError("f_ec must be >= 1")
        if not (0 < self.qber_abort <= 0.5 and 0 < self.phase_abort <= 0.5):
            raise ValueError("abort thresholds must lie in (0, 0.5]")
        if self.bound_sigma < 0:
            raise ValueError("bound_sigma must be >= 0")


@dataclass(frozen=True)
class MetricsWindow:
    window_start_s: float
    window_len_s: float
    qber: Optional[float]
    keyrate_bps: float
    ex: Optional[float]
    ep_u: Optional[float]
    aborted: bool
    jz: float = 0.0

    def csv_row(self) -> list[str]:
        return [
            _fmt(self.window_start_s), _fmt(self.window_len_s), _fmt(self.qber), _fmt(self.ex),
            _fmt(self.ep_u), _fmt(self.keyrate_bps), "1" if self.aborted else "0",
        ]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def window_metrics(
    tally: GainTally,
    mu: float,
    pair_rate_hz: float,
    cfg: MetricsConfig,
    start_s: float,
    length_s: float,
) -> MetricsWindow:
    """Evaluate one integration window.

    A window whose QBER or phase-error bound is missing cannot pass the
    abort check and is reported as aborted with zero key rate.
    """
    nf = normalization_factors(mu)
    jz = gain_jz(tally) if tally.rounds_total else 0.0
    ez = qber_z(tally)
    ex = error_x(tally, nf)
    bounds = estimate_bounds(tally, nf, cfg.bound_sigma)
    ep = phase_error_upper(tally, bounds, nf) if bounds is not None else None
    aborted = ez is None or ep is None or ez > cfg.qber_abort or ep > cfg.phase_abort
    rate = 0.0 if aborted else keyrate_bps(secret_key_rate(jz, ep, ez, cfg.f_ec), pair_rate_hz)
    return MetricsWindow(start_s, length_s, ez, rate, ex, ep, aborted, jz)


def windows_to_csv(windows: Iterable[MetricsWindow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(WINDOW_CSV_HEADER)
    for win in windows:
        w.writerow(win.csv_row())
    return buf.getvalue()


def read_windows_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        out.append({
            k: (None if r[k] == "" else (r[k] == "1" if k == "aborted" else float(r[k])))
            for k in WINDOW_CSV_HEADER
        })
    return out
