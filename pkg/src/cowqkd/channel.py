"""Fiber channel, detector noise figures and the passive eavesdropper."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .encoding import Amplitude, ProtocolConfig, PulsePair


def _db_to_linear(x_db: float) -> float:
    return 10.0 ** (0.1 * x_db)


@dataclass(frozen=True)
class ChannelModel:
    """Lossy fiber between Alice and Bob.

    ``noise_click_scale`` converts excess noise (shot-noise units) into an
    additive per-slot false-click probability.
    """

    kappa_db_per_km: float = 0.2
    distance_km: float = 0.0
    excess_noise_nu: float = 0.0
    extra_loss_db: float = 0.0
    noise_click_scale: float = 0.0

    def __post_init__(self):
        for name in ("kappa_db_per_km", "distance_km", "excess_noise_nu", "extra_loss_db", "noise_click_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def noise_click_prob(self) -> float:
        return self.excess_noise_nu * self.noise_click_scale


@dataclass(frozen=True)
class DetectorModel:
    eta: float = 0.1
    n_e: float = 0.0
    dark_count_prob: float = 0.0
    dead_time_us: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.n_e < 0:
            raise ValueError(f"n_e must be >= 0, got {self.n_e}")
        if not 0.0 <= self.dark_count_prob < 1.0:
            raise ValueError(f"dark_count_prob must lie in [0, 1), got {self.dark_count_prob}")
        if self.dead_time_us < 0:
            raise ValueError(f"dead_time_us must be >= 0, got {self.dead_time_us}")


@dataclass(frozen=True)
class EveModel:
    """Passive tap collecting a fraction ``tap_fraction_e`` of the light.

    The tap attenuates Bob's signal, degrades monitoring-line visibility by
    ``visibility_penalty * e`` and flips data-line bits with probability
    ``disturbance_delta * e``.
    """

    enabled: bool = False
    tap_fraction_e: float = 0.0
    disturbance_delta: float = 0.0
    visibility_penalty: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.tap_fraction_e < 1.0:
            raise ValueError(f"tap_fraction_e must lie in [0, 1), got {self.tap_fraction_e}")
        if not 0.0 <= self.disturbance_delta <= 1.0:
            raise ValueError(f"disturbance_delta must lie in [0, 1], got {self.disturbance_delta}")
        if not 0.0 <= self.visibility_penalty <= 1.0:
            raise ValueError(f"visibility_penalty must lie in [0, 1], got {self.visibility_penalty}")

    @property
    def effective_tap(self) -> float:
        return self.tap_fraction_e if self.enabled else 0.0


def path_loss(kappa: float, d: float) -> float:
    """Linear path loss ``10**(0.1 * kappa * d)``."""
    if kappa < 0 or d < 0:
        raise ValueError("kappa and d must be non-negative")
    return _db_to_linear(kappa * d)


def transmission(model: ChannelModel) -> float:
    return 1.0 / (path_loss(model.kappa_db_per_km, model.distance_km) * _db_to_linear(model.extra_loss_db))


def channel_added_noise(T: float, nu: float) -> float:
    """Channel noise referred to the input, ``1/T - 1 + nu``."""
    if not 0.0 < T <= 1.0:
        raise ValueError(f"transmission must lie in (0, 1], got {T}")
    if nu < 0:
        raise ValueError(f"excess noise must be >= 0, got {nu}")
    return 1.0 / T - 1.0 + nu


def detection_noise(det: DetectorModel, eta_minus_one_form: bool = False) -> float:
    """Homodyne detection noise referred to the input.

    The default is ``(1 + n_e) / eta - 1``, which vanishes for an ideal
    detector.  ``eta_minus_one_form=True`` returns ``(1 + n_e) / (eta - 1)``
    instead; that form is negative for every eta < 1 and undefined at 1.
    """
    if eta_minus_one_form:
        if det.eta == 1.0:
            raise ZeroDivisionError("literal form is undefined at eta = 1")
        return (1.0 + det.n_e) / (det.eta - 1.0)
    return (1.0 + det.n_e) / det.eta - 1.0


def total_line_noise(model: ChannelModel, det: DetectorModel, eta_minus_one_form: bool = False) -> float:
    T = transmission(model)
    return channel_added_noise(T, model.excess_noise_nu) + detection_noise(det, eta_minus_one_form) / T


@dataclass(frozen=True)
class AttenuatedPulsePair:
    """Per-round state arriving at Bob.

    ``mu_early``/``mu_late`` are mean photon numbers per slot, including the
    extinction leak into empty slots.
    """

    pulse: PulsePair
    mu_eff: float
    mu_early: float
    mu_late: float
    visibility: float
    p_flip: float


def effective_mu(cfg: ProtocolConfig, model: ChannelModel, eve: EveModel) -> float:
    return cfg.mu * transmission(model) * (1.0 - eve.effective_tap)


def effective_visibility(v0: float, eve: EveModel) -> float:
    return v0 * (1.0 - eve.visibility_penalty * eve.effective_tap)


def flip_probability(eve: EveModel) -> float:
    return eve.disturbance_delta * eve.effective_tap


def apply_channel(
    pulse: PulsePair,
    cfg: ProtocolConfig,
    model: ChannelModel,
    eve: EveModel,
    visibility_v0: float = 1.0,
) -> AttenuatedPulsePair:
    mu_eff = effective_mu(cfg, model, eve)
    leak = mu_eff * cfg.extinction_leak
    return AttenuatedPulsePair(
        pulse=pulse,
        mu_eff=mu_eff,
        mu_early=mu_eff if pulse.slot_early is Amplitude.ALPHA else leak,
        mu_late=mu_eff if pulse.slot_late is Amplitude.ALPHA else leak,
        visibility=effective_visibility(visibility_v0, eve),
        p_flip=flip_probability(eve),
    )


def link_budget(model: ChannelModel, det: DetectorModel) -> dict:
    """Closed-form loss and noise figures for run metadata."""
    T = transmission(model)
    return {
        "path_loss": path_loss(model.kappa_db_per_km, model.distance_km),
        "transmission": T,
        "channel_added_noise": channel_added_noise(T, model.excess_noise_nu),
        "detection_noise": detection_noise(det),
        "total_line_noise": total_line_noise(model, det),
        "loss_db": -10.0 * math.log10(T),
    }
