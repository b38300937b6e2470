"""Pace key-unit production by the simulated (or replayed) key rate."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from ..metrics import read_windows_csv
from .store import KeyStore


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant key rate, cycled once the series is exhausted.

    ``qber`` optionally carries the matching QBER series for the metrics
    endpoint.
    """

    keyrate_bps: Sequence[float]
    window_s: float = 10.0
    qber: Optional[Sequence[Optional[float]]] = None

    def __post_init__(self):
        if not self.keyrate_bps:
            raise ValueError("empty rate schedule")
        if self.window_s <= 0:
            raise ValueError("window_s must be > 0")

    @classmethod
    def constant(cls, rate_bps: float) -> "RateSchedule":
        return cls([rate_bps], 1.0)

    @classmethod
    def from_windows_csv(cls, path) -> "RateSchedule":
        rows = read_windows_csv(Path(path).read_text())
        window = rows[0]["window_s"] if rows else 10.0
        return cls([r["keyrate_bps"] or 0.0 for r in rows], window, [r["qber"] for r in rows])

    @classmethod
    def from_run(cls, result) -> "RateSchedule":
        return cls(
            [w.keyrate_bps for w in result.windows],
            result.scenario.window_s,
            [w.qber for w in result.windows],
        )

    def index(self, t: float) -> int:
        return int(t // self.window_s) % len(self.keyrate_bps)

    def rate(self, t: float) -> float:
        return self.keyrate_bps[self.index(t)]

    def bits_between(self, t0: float, t1: float) -> float:
        """Integral of the rate over ``[t0, t1)``."""
        bits, t = 0.0, t0
        while t < t1:
            edge = (t // self.window_s + 1) * self.window_s
            step = min(edge, t1) - t
            bits += self.rate(t) * step
            t += step
        return bits


class KeyFeed:
    """Single producer turning accumulated secret bits into key units."""

    def __init__(self, store: KeyStore, schedule: RateSchedule):
        self.store = store
        self.schedule = schedule
        self.t = 0.0
        self._bits = 0.0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def advance(self, dt_s: float) -> int:
        """Move simulated time forward; returns units stored."""
        self._bits += self.schedule.bits_between(self.t, self.t + dt_s)
        self.t += dt_s
        n = int(self._bits // self.store.stream.unit_bits)
        self._bits -= n * self.store.stream.unit_bits
        return self.store.add_units(n) if n else 0

    def current(self) -> dict:
        i = self.schedule.index(self.t)
        qber = self.schedule.qber[i] if self.schedule.qber is not None else None
        return {"keyrate_bps": self.schedule.keyrate_bps[i], "qber": qber, "t_s": self.t}

    def start(self, tick_s: float = 1.0):
        def loop():
            while not self._stop.wait(tick_s):
                self.advance(tick_s)

        self._thread = threading.Thread(target=loop, name="key-feed", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
