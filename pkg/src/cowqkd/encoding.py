"""Alice's side of the COW protocol: symbol sampling and two-slot encoding.

Each round ``n`` occupies two consecutive time slots ``2n-1`` (early) and
``2n`` (late).  Logical values are carried by the slot that holds the
coherent pulse:

=========  =================
symbol     (early, late)
=========  =================
Bit0       (vacuum, alpha)
Bit1       (alpha, vacuum)
Decoy      (alpha, alpha)
=========  =================

Amplitudes are symbolic; every downstream probability depends only on the
mean photon number ``mu`` and the channel/detector parameters.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

# photon energy constants for the power -> mu mapping
PLANCK_J_S = 6.62607015e-34
LIGHT_SPEED_M_S = 299_792_458.0

DEFAULT_PULSE_WIDTH_S = 600e-9
DEFAULT_PAIR_RATE_HZ = 1.0 / (2.0 * DEFAULT_PULSE_WIDTH_S)


class ProtocolVariant(str, enum.Enum):
    COW3 = "COW3"
    COW4 = "COW4"


class Symbol(enum.IntEnum):
    BIT0 = 0
    BIT1 = 1
    DECOY = 2


class Amplitude(enum.IntEnum):
    VACUUM = 0
    ALPHA = 1


@dataclass(frozen=True)
class ProtocolConfig:
    """Transmitter settings.

    Attributes
    ----------
    variant : ProtocolVariant
        COW3 (no decoys) or COW4 (decoy rounds with light in both slots).
    mu : float
        Mean photon number of each non-vacuum pulse.
    decoy_fraction_f : float
        Probability that a round carries a decoy.  Forced to 0 for COW3.
    pair_rate_hz : float
        Rounds (pulse pairs) per second.  The slot period is
        ``1 / (2 * pair_rate_hz)``.
    tx_power_dbm : float, optional
        Launch power the ``mu`` value was derived from, kept for provenance.
    extinction_leak : float
        Fraction of ``mu`` leaking into nominally empty slots (finite
        extinction ratio of the intensity modulator).
    """

    variant: ProtocolVariant = ProtocolVariant.COW4
    mu: float = 0.5
    decoy_fraction_f: float = 0.0
    pair_rate_hz: float = DEFAULT_PAIR_RATE_HZ
    tx_power_dbm: Optional[float] = None
    extinction_leak: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", ProtocolVariant(self.variant))
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not 0.0 <= self.decoy_fraction_f < 1.0:
            raise ValueError(f"decoy_fraction_f must lie in [0, 1), got {self.decoy_fraction_f}")
        if self.variant is ProtocolVariant.COW3 and self.decoy_fraction_f != 0.0:
            raise ValueError("COW3 has no decoy state: decoy_fraction_f must be 0")
        if not self.pair_rate_hz > 0:
            raise ValueError(f"pair_rate_hz must be > 0, got {self.pair_rate_hz}")
        if not 0.0 <= self.extinction_leak < 1.0:
            raise ValueError(f"extinction_leak must lie in [0, 1), got {self.extinction_leak}")

    @property
    def slot_period_s(self) -> float:
        return 0.5 / self.pair_rate_hz

    def symbol_probabilities(self) -> tuple[float, float, float]:
        """(P(Bit0), P(Bit1), P(Decoy))."""
        f = self.decoy_fraction_f
        return (1.0 - f) / 2.0, (1.0 - f) / 2.0, f


@dataclass(frozen=True)
class PulsePair:
    slot_early: Amplitude
    slot_late: Amplitude
    round_index: int


_PATTERNS = {
    Symbol.BIT0: (Amplitude.VACUUM, Amplitude.ALPHA),
    Symbol.BIT1: (Amplitude.ALPHA, Amplitude.VACUUM),
    Symbol.DECOY: (Amplitude.ALPHA, Amplitude.ALPHA),
}


def symbols_from_uniform(u: np.ndarray, f: float) -> np.ndarray:
    """Map uniforms in [0, 1) to symbol codes.

    ``[0, f)`` is a decoy, ``[f, f + (1-f)/2)`` Bit0, the rest Bit1.
    """
    half = f + (1.0 - f) / 2.0
    out = np.where(u < half, Symbol.BIT0, Symbol.BIT1).astype(np.int8)
    out[u < f] = Symbol.DECOY
    return out


def sample_symbol(cfg: ProtocolConfig, rng: np.random.Generator) -> Symbol:
    return Symbol(int(symbols_from_uniform(np.array([rng.random()]), cfg.decoy_fraction_f)[0]))


def sample_symbols(cfg: ProtocolConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    return symbols_from_uniform(rng.random(size), cfg.decoy_fraction_f)


def encode_symbol(sym: Symbol, n: int) -> PulsePair:
    if n < 1:
        raise ValueError(f"round index starts at 1, got {n}")
    early, late = _PATTERNS[Symbol(sym)]
    return PulsePair(early, late, n)


def light_slots(symbols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (early, late) occupancy for an array of symbol codes."""
    symbols = np.asarray(symbols)
    return symbols != Symbol.BIT0, symbols != Symbol.BIT1


def normalization_factors(mu: float) -> tuple[float, float]:
    """Return ``(N+, N-) = (2(1 + e^-mu), 2(1 - e^-mu))``."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    e = math.exp(-mu)
    return 2.0 * (1.0 + e), 2.0 * (1.0 - e)


def mu_from_power(
    tx_power_dbm: float,
    attenuation_db: float,
    pulse_width_s: float = DEFAULT_PULSE_WIDTH_S,
    wavelength_m: float = 1550e-9,
) -> float:
    """Mean photon number per pulse for a launch power behind an attenuator.

    Photons per pulse are ``P * tau / (h c / lambda)``; the internal
    attenuator scales that by ``10**(-attenuation_db / 10)``.
    """
    power_w = 1e-3 * 10.0 ** (tx_power_dbm / 10.0)
    photon_j = PLANCK_J_S * LIGHT_SPEED_M_S / wavelength_m
    return power_w * pulse_width_s / photon_j * 10.0 ** (-attenuation_db / 10.0)
