import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cowqkd.channel import AttenuatedPulsePair, DetectorModel
from cowqkd.detection import (
    NO_CLICK, DataClick, Line, MonitorClick, ReceiverConfig, RoundOutcome, apply_dead_time,
    click_probability, data_clicks, data_line_detect, is_interfering, m1_probability, monitor_clicks,
    monitor_line_detect, route_from_uniform, route_round,
)
from cowqkd.encoding import Symbol, encode_symbol

N = 1_000_000


def within_3_sigma(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p)) + 1e-9


def pulse(sym, mu, visibility=1.0, p_flip=0.0, leak=0.0):
    pp = encode_symbol(sym, 1)
    return AttenuatedPulsePair(
        pp, mu,
        mu if sym != Symbol.BIT0 else mu * leak,
        mu if sym != Symbol.BIT1 else mu * leak,
        visibility, p_flip,
    )


def u(rng, n=N):
    return rng.random(n)


def test_route_degenerate_splitter():
    assert np.all(route_from_uniform(np.random.default_rng(0).random(1000), 1.0) == Line.DATA)


@pytest.mark.parametrize("t_B", [0.9, 0.5])
def test_route_fraction(t_B):
    r = route_from_uniform(np.random.default_rng(1).random(N), t_B)
    assert within_3_sigma(int(np.count_nonzero(r == Line.DATA)), N, t_B)


def test_route_round_scalar():
    assert route_round(pulse(Symbol.BIT0, 0.1), ReceiverConfig(t_B=1.0), np.random.default_rng(0)) is Line.DATA


def test_vacuum_never_clicks():
    rng = np.random.default_rng(2)
    z = np.zeros(10_000)
    slot = data_clicks(z, z, 0.5, 0.0, 0.0, u(rng, 10_000), u(rng, 10_000), u(rng, 10_000), u(rng, 10_000))
    assert np.all(slot == NO_CLICK)


def test_bright_bit0_clicks_late():
    rng = np.random.default_rng(3)
    p = pulse(Symbol.BIT0, 50.0)
    clicks = [data_line_detect(p, DetectorModel(eta=1.0), rng) for _ in range(200)]
    assert all(c is DataClick.T1 for c in clicks)


def test_data_click_probability_matches_closed_form():
    rng = np.random.default_rng(4)
    eta, mu = 0.25, 0.4
    slot = data_clicks(np.zeros(N), np.full(N, mu), eta, 0.0, 0.0, u(rng), u(rng), u(rng), u(rng))
    assert within_3_sigma(int(np.count_nonzero(slot >= 0)), N, 1 - math.exp(-0.1))
    assert 1 - math.exp(-eta * mu) == pytest.approx(0.09516, abs=1e-5)


def test_flip_rate_on_data_line():
    rng = np.random.default_rng(5)
    slot = data_clicks(np.zeros(N), np.full(N, 30.0), 1.0, 0.0, 0.03, u(rng), u(rng), u(rng), u(rng))
    assert within_3_sigma(int(np.count_nonzero(slot == DataClick.T0)), N, 0.03)


def test_click_probability_with_false_clicks():
    assert click_probability(0.0, 0.5, 0.01) == pytest.approx(0.01)
    assert click_probability(1.0, 1.0, 0.0) == pytest.approx(1 - math.exp(-1))


@given(st.floats(0, 20), st.floats(0.01, 1), st.floats(0, 0.5))
def test_click_probability_is_a_probability(mean, eta, dark):
    p = float(click_probability(mean, eta, dark))
    assert dark - 1e-15 <= p <= 1.0


def _monitor(interfered, visibility, mean, dark, seed):
    rng = np.random.default_rng(seed)
    inter = np.full(N, interfered)
    return monitor_clicks(np.full(N, mean), m1_probability(inter, visibility), 0.5, dark,
                          u(rng), u(rng), u(rng), u(rng), u(rng))


def test_perfect_visibility_never_fires_m1():
    det = _monitor(True, 1.0, 2.0, 0.0, 6)
    assert np.count_nonzero(det == MonitorClick.M1) == 0
    assert np.count_nonzero(det == MonitorClick.M0) > 0


def test_no_coherence_splits_evenly():
    det = _monitor(True, 0.0, 2.0, 0.0, 7)
    n = int(np.count_nonzero(det >= 0))
    assert within_3_sigma(int(np.count_nonzero(det == MonitorClick.M1)), n, 0.5)


def test_m1_fraction_on_interfering_rounds():
    det = _monitor(True, 0.98, 2.0, 0.0, 8)
    n = int(np.count_nonzero(det >= 0))
    assert within_3_sigma(int(np.count_nonzero(det == MonitorClick.M1)), n, 0.01)


def test_single_pulse_rounds_split_evenly():
    det = _monitor(False, 0.98, 1.0, 0.0, 9)
    n = int(np.count_nonzero(det >= 0))
    assert within_3_sigma(int(np.count_nonzero(det == MonitorClick.M1)), n, 0.5)


def test_interference_rules():
    b0, b1, dc = (pulse(s, 0.3) for s in (Symbol.BIT0, Symbol.BIT1, Symbol.DECOY))
    assert is_interfering(dc, None)
    assert is_interfering(b1, b0)       # previous late pulse meets current early pulse
    assert not is_interfering(b1, b1)
    assert not is_interfering(b0, b0)
    assert not is_interfering(b1, None)


def test_scalar_monitor_decoy_perfect_visibility():
    cfg = ReceiverConfig(t_B=0.5, detector=DetectorModel(eta=1.0), visibility_V0=1.0)
    rng = np.random.default_rng(10)
    clicks = [monitor_line_detect([pulse(Symbol.DECOY, 5.0, visibility=1.0)], cfg, rng) for _ in range(200)]
    assert all(c is MonitorClick.M0 for c in clicks)


def test_round_outcome_consistency():
    RoundOutcome(1, Symbol.BIT0, Line.DATA, data_click=DataClick.T1)
    with pytest.raises(ValueError):
        RoundOutcome(1, Symbol.BIT0, Line.MONITOR, data_click=DataClick.T1)
    with pytest.raises(ValueError):
        RoundOutcome(1, Symbol.BIT0, Line.DATA, data_click=DataClick.T1, monitor_click=MonitorClick.M0)
    assert RoundOutcome(2, Symbol.BIT1, Line.MONITOR).line is None


def test_dead_time_zero_is_identity():
    t = np.sort(np.random.default_rng(11).random(1000))
    assert apply_dead_time(t, 0.0).all()


def test_dead_time_drops_close_click():
    assert apply_dead_time(np.array([0.0, 10e-6]), 50.0).tolist() == [True, False]
    # a click exactly one dead time later is accepted
    assert apply_dead_time(np.array([0.0, 50e-6]), 50.0).tolist() == [True, True]


def test_dead_time_is_per_detector():
    keep = apply_dead_time(np.array([0.0, 1e-6, 2e-6]), 50.0, np.array([0, 1, 0]))
    assert keep.tolist() == [True, True, False]


def test_dead_time_rejects_unsorted():
    with pytest.raises(ValueError):
        apply_dead_time(np.array([1.0, 0.5]), 1.0)


def test_dead_time_state_carries_across_chunks():
    t = np.sort(np.random.default_rng(12).random(5000)) * 0.1
    whole = apply_dead_time(t, 50.0)
    state = {}
    parts = np.concatenate([apply_dead_time(c, 50.0, None, state) for c in np.array_split(t, 7)])
    assert np.array_equal(whole, parts)


def test_dead_time_rate_formula():
    rate, tau = 20_000.0, 50e-6
    rng = np.random.default_rng(13)
    t = np.cumsum(rng.exponential(1 / rate, size=400_000))
    accepted = np.count_nonzero(apply_dead_time(t, tau * 1e6)) / t[-1]
    assert accepted == pytest.approx(rate / (1 + rate * tau), rel=0.02)


@given(st.lists(st.floats(0, 1e-3), min_size=1, max_size=200), st.floats(0, 100))
def test_dead_time_accepted_clicks_are_spaced(times, dead_us):
    t = np.sort(np.array(times))
    kept = t[apply_dead_time(t, dead_us)]
    assert kept[0] == t[0]
    assert np.all(np.diff(kept) >= dead_us * 1e-6 - 1e-18)


def test_receiver_validation():
    with pytest.raises(ValueError):
        ReceiverConfig(t_B=0.0)
    with pytest.raises(ValueError):
        ReceiverConfig(visibility_V0=1.1)
