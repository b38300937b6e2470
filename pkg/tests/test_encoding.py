import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cowqkd.encoding import (
    Amplitude, ProtocolConfig, ProtocolVariant, Symbol, encode_symbol, light_slots, mu_from_power,
    normalization_factors, sample_symbol, sample_symbols, symbols_from_uniform,
)


def test_no_decoys_splits_bits_evenly():
    cfg = ProtocolConfig(ProtocolVariant.COW4, mu=0.5, decoy_fraction_f=0.0)
    assert cfg.symbol_probabilities() == (0.5, 0.5, 0.0)


@pytest.mark.parametrize("f", [1.0, -0.1, 1.5])
def test_decoy_fraction_out_of_range(f):
    with pytest.raises(ValueError):
        ProtocolConfig(ProtocolVariant.COW4, mu=0.5, decoy_fraction_f=f)


def test_cow3_rejects_decoys():
    with pytest.raises(ValueError):
        ProtocolConfig(ProtocolVariant.COW3, mu=0.5, decoy_fraction_f=0.1)


def test_symbol_frequencies_match_probabilities():
    cfg = ProtocolConfig(ProtocolVariant.COW4, mu=0.5, decoy_fraction_f=0.2)
    n = 1_000_000
    sym = sample_symbols(cfg, np.random.default_rng(3), n)
    counts = np.bincount(sym, minlength=3)
    for p, c in zip(cfg.symbol_probabilities(), counts):
        assert abs(c - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_symbol_from_uniform_boundaries():
    u = np.array([0.0, 0.0999, 0.1, 0.5499, 0.55, 0.9999])
    assert symbols_from_uniform(u, 0.1).tolist() == [2, 2, 0, 0, 1, 1]


def test_sample_symbol_is_a_symbol():
    s = sample_symbol(ProtocolConfig(mu=0.3, decoy_fraction_f=0.5), np.random.default_rng(0))
    assert isinstance(s, Symbol)


@pytest.mark.parametrize("sym,n,expected", [
    (Symbol.BIT0, 1, (Amplitude.VACUUM, Amplitude.ALPHA)),
    (Symbol.BIT1, 7, (Amplitude.ALPHA, Amplitude.VACUUM)),
    (Symbol.DECOY, 3, (Amplitude.ALPHA, Amplitude.ALPHA)),
])
def test_pulse_patterns(sym, n, expected):
    p = encode_symbol(sym, n)
    assert (p.slot_early, p.slot_late) == expected
    assert p.round_index == n


def test_round_index_starts_at_one():
    with pytest.raises(ValueError):
        encode_symbol(Symbol.BIT0, 0)


def test_light_slots_agree_with_patterns():
    sym = np.array([0, 1, 2])
    early, late = light_slots(sym)
    for k, s in enumerate(sym):
        p = encode_symbol(Symbol(s), 1)
        assert early[k] == (p.slot_early is Amplitude.ALPHA)
        assert late[k] == (p.slot_late is Amplitude.ALPHA)


def test_normalization_examples():
    assert normalization_factors(0.0) == (4.0, 0.0)
    n_plus, n_minus = normalization_factors(0.5)
    assert n_plus == pytest.approx(3.2131, abs=1e-4)
    assert n_minus == pytest.approx(0.7869, abs=1e-4)
    assert normalization_factors(60.0) == pytest.approx((2.0, 2.0), abs=1e-12)


@given(st.floats(0, 50))
def test_normalization_sum_is_four(mu):
    n_plus, n_minus = normalization_factors(mu)
    assert n_plus + n_minus == pytest.approx(4.0)
    assert 2.0 <= n_plus <= 4.0 and 0.0 <= n_minus <= 2.0


def test_mu_from_power_scales_with_power_and_attenuation():
    base = mu_from_power(0.0, 90.0)
    assert mu_from_power(10.0, 90.0) == pytest.approx(10 * base)
    assert mu_from_power(0.0, 100.0) == pytest.approx(base / 10)
    # 1 mW for 600 ns at 1550 nm is about 4.68e9 photons
    assert mu_from_power(0.0, 0.0) == pytest.approx(4.68e9, rel=1e-2)


def test_slot_period():
    assert ProtocolConfig(pair_rate_hz=1e6).slot_period_s == pytest.approx(5e-7)
