"""Bob's receiver: passive routing, threshold detectors, dead time.

The array functions (``*_clicks``) take pre-drawn uniforms so the engine
can feed them from a counter-based stream; the single-round functions wrap
them for direct use with a ``numpy.random.Generator``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import AttenuatedPulsePair, DetectorModel
from .encoding import Amplitude, Symbol


class Line(enum.IntEnum):
    DATA = 0
    MONITOR = 1


class DataClick(enum.IntEnum):
    T0 = 0
    T1 = 1


class MonitorClick(enum.IntEnum):
    M0 = 0
    M1 = 1


NO_CLICK = -1


@dataclass(frozen=True)
class ReceiverConfig:
    t_B: float = 0.9
    detector: DetectorModel = DetectorModel()
    visibility_V0: float = 0.98

    def __post_init__(self):
        if not 0.0 < self.t_B <= 1.0:
            raise ValueError(f"t_B must lie in (0, 1], got {self.t_B}")
        if not 0.0 < self.visibility_V0 <= 1.0:
            raise ValueError(f"visibility_V0 must lie in (0, 1], got {self.visibility_V0}")


@dataclass(frozen=True)
class RoundOutcome:
    """What Bob recorded in one round (after dead-time suppression).

    ``interfered`` marks monitor rounds where two light-carrying slots were
    combined in the interferometer, either inside a decoy round or across
    the boundary with the previous round's late pulse.
    """

    round_index: int
    sent: Symbol
    routed: Line
    data_click: Optional[DataClick] = None
    monitor_click: Optional[MonitorClick] = None
    interfered: bool = False

    def __post_init__(self):
        if self.data_click is not None and self.monitor_click is not None:
            raise ValueError("a round is routed to exactly one line")
        if self.data_click is not None and self.routed is not Line.DATA:
            raise ValueError("data click on a round routed to the monitor")
        if self.monitor_click is not None and self.routed is not Line.MONITOR:
            raise ValueError("monitor click on a round routed to the data line")

    @property
    def line(self) -> Optional[Line]:
        if self.data_click is None and self.monitor_click is None:
            return None
        return self.routed


def click_probability(mean_photons, eta: float, false_click: float = 0.0):
    """P(click) for a threshold detector: photon clicks OR false clicks."""
    return 1.0 - np.exp(-eta * np.asarray(mean_photons, dtype=float)) * (1.0 - false_click)


def route_from_uniform(u: np.ndarray, t_B: float) -> np.ndarray:
    return np.where(np.asarray(u) < t_B, Line.DATA, Line.MONITOR).astype(np.int8)


def data_clicks(
    mu_early: np.ndarray,
    mu_late: np.ndarray,
    eta: float,
    false_click: float,
    p_flip,
    u_early: np.ndarray,
    u_late: np.ndarray,
    u_tie: np.ndarray,
    u_flip: np.ndarray,
) -> np.ndarray:
    """Recorded data-line slot per round: -1 none, 0 early (T0), 1 late (T1).

    Each slot fires independently; a double click is resolved uniformly and
    the recorded slot is then flipped with probability ``p_flip``.
    """
    early = u_early < click_probability(mu_early, eta, false_click)
    late = u_late < click_probability(mu_late, eta, false_click)
    slot = np.full(early.shape, NO_CLICK, dtype=np.int8)
    slot[early] = DataClick.T0
    slot[late] = DataClick.T1
    both = early & late
    slot[both] = np.where(u_tie[both] < 0.5, DataClick.T0, DataClick.T1)
    flip = (slot != NO_CLICK) & (u_flip < p_flip)
    slot[flip] ^= 1
    return slot


def monitor_clicks(
    mean_photons: np.ndarray,
    p_m1: np.ndarray,
    eta: float,
    false_click: float,
    u_signal: np.ndarray,
    u_port: np.ndarray,
    u_dark0: np.ndarray,
    u_dark1: np.ndarray,
    u_tie: np.ndarray,
) -> np.ndarray:
    """Recorded monitor detector per round: -1 none, 0 M0, 1 M1.

    A photon click happens with probability ``1 - exp(-eta * mean)`` and
    exits at M1 with probability ``p_m1``; each detector also fires on its
    own false clicks.  Double clicks are resolved uniformly.
    """
    signal = u_signal < click_probability(mean_photons, eta)
    to_m1 = u_port < p_m1
    fired0 = (signal & ~to_m1) | (u_dark0 < false_click)
    fired1 = (signal & to_m1) | (u_dark1 < false_click)
    det = np.full(fired0.shape, NO_CLICK, dtype=np.int8)
    det[fired0] = MonitorClick.M0
    det[fired1] = MonitorClick.M1
    both = fired0 & fired1
    det[both] = np.where(u_tie[both] < 0.5, MonitorClick.M0, MonitorClick.M1)
    return det


def m1_probability(interfered, visibility):
    """Photon exit probability toward M1: ``(1 - V)/2`` if interfering, else 1/2."""
    return np.where(interfered, (1.0 - np.asarray(visibility)) / 2.0, 0.5)


def route_round(pulse: AttenuatedPulsePair, cfg: ReceiverConfig, rng: np.random.Generator) -> Line:
    return Line(int(route_from_uniform(rng.random(1), cfg.t_B)[0]))


def data_line_detect(
    pulse: AttenuatedPulsePair,
    det: DetectorModel,
    rng: np.random.Generator,
    false_click: Optional[float] = None,
) -> Optional[DataClick]:
    if false_click is None:
        false_click = det.dark_count_prob
    u = rng.random(4)
    slot = data_clicks(
        np.array([pulse.mu_early]), np.array([pulse.mu_late]), det.eta, false_click,
        pulse.p_flip, u[0:1], u[1:2], u[2:3], u[3:4],
    )[0]
    return None if slot == NO_CLICK else DataClick(int(slot))


def is_interfering(current: AttenuatedPulsePair, previous: Optional[AttenuatedPulsePair]) -> bool:
    cur = current.pulse
    if cur.slot_early is Amplitude.ALPHA and cur.slot_late is Amplitude.ALPHA:
        return True
    return (
        previous is not None
        and previous.pulse.slot_late is Amplitude.ALPHA
        and cur.slot_early is Amplitude.ALPHA
    )


def monitor_line_detect(
    pulses: Sequence[AttenuatedPulsePair],
    cfg: ReceiverConfig,
    rng: np.random.Generator,
    false_click: Optional[float] = None,
) -> Optional[MonitorClick]:
    """Monitor click for the last round in ``pulses``.

    ``pulses`` is ``[current]`` or ``[previous, current]``; the previous
    round only matters through its late pulse.
    """
    if false_click is None:
        false_click = cfg.detector.dark_count_prob
    current = pulses[-1]
    previous = pulses[-2] if len(pulses) > 1 else None
    interfered = is_interfering(current, previous)
    mean = 2.0 * current.mu_eff if interfered else current.mu_early + current.mu_late
    u = rng.random(5)
    det = monitor_clicks(
        np.array([mean]), m1_probability(np.array([interfered]), current.visibility),
        cfg.detector.eta, false_click, u[0:1], u[1:2], u[2:3], u[3:4], u[4:5],
    )[0]
    return None if det == NO_CLICK else MonitorClick(int(det))


def apply_dead_time(
    times_s: np.ndarray,
    dead_time_us: float,
    detectors: Optional[np.ndarray] = None,
    last_accepted: Optional[dict] = None,
) -> np.ndarray:
    """Non-paralyzable dead-time filter; returns the accepted-click mask.

    A click arriving less than ``dead_time_us`` after the last accepted
    click on the same detector is dropped.  ``last_accepted`` maps detector
    label to the time of its last accepted click and is updated in place,
    so a stream can be filtered chunk by chunk.
    """
    times_s = np.asarray(times_s, dtype=float)
    if times_s.size > 1 and np.any(np.diff(times_s) < 0):
        raise ValueError("click timestamps must be non-decreasing")
    if detectors is None:
        detectors = np.zeros(times_s.shape, dtype=np.int8)
    if last_accepted is None:
        last_accepted = {}
    keep = np.zeros(times_s.shape, dtype=bool)
    tau = dead_time_us * 1e-6
    for label in np.unique(detectors):
        idx = np.flatnonzero(detectors == label)
        t = times_s[idx]
        if tau <= 0:
            keep[idx] = True
            if t.size:
                last_accepted[int(label)] = float(t[-1])
            continue
        last = last_accepted.get(int(label), -np.inf)
        i = int(np.searchsorted(t, last + tau, side="left"))
        while i < t.size:
            keep[idx[i]] = True
            last = t[i]
            # max() guards against last + tau rounding back to last
            i = max(i + 1, int(np.searchsorted(t, last + tau, side="left")))
        last_accepted[int(label)] = float(last)
    return keep
