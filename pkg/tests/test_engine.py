import math

import numpy as np
import pytest

from cowqkd.engine import (
    BlockResult, SweepSpec, cell_scenario, merge_parallel, replicate_seed, run_scenario, run_sweep,
    set_path, simulate_block, sweep_to_csv,
)
from cowqkd.metrics import (
    MetricsConfig, U_AA, error_x, estimate_bounds, gain_jz, phase_error_upper, qber_z, windows_to_csv,
)
from cowqkd.encoding import normalization_factors

from conftest import scenario_dict


def within_3_sigma(k, n, p):
    return abs(k - n * p) <= 3 * math.sqrt(n * p * (1 - p))


IDEAL = dict(
    protocol__variant="COW3", protocol__decoy_fraction_f=0.0, protocol__extinction_leak=0.0,
    channel__distance_km=0.0, channel__extra_loss_db=0.0,
    receiver__detector__eta=1.0, receiver__detector__dark_count_prob=0.0,
)


def test_window_count(make_scenario):
    r = run_scenario(make_scenario(duration_s=30.0, rounds_per_window=2000))
    assert len(r.windows) == 3
    assert [w.window_start_s for w in r.windows] == [0.0, 10.0, 20.0]


def test_partial_last_window(make_scenario):
    s = make_scenario(duration_s=25.0, rounds_per_window=2000)
    assert s.window_lengths == [10.0, 10.0, 5.0]
    assert len(run_scenario(s).windows) == 3


def test_round_budget_caps_real_rate(make_scenario):
    s = make_scenario(rounds_per_window=1000)
    assert s.total_rounds == 2000
    r = run_scenario(s)
    assert r.summary["rounds_simulated"] == 2000
    assert r.summary["time_dilation"] == pytest.approx(s.protocol.pair_rate_hz * 20.0 / 2000)


def test_same_seed_same_bytes(make_scenario):
    a = windows_to_csv(run_scenario(make_scenario()).windows)
    b = windows_to_csv(run_scenario(make_scenario()).windows)
    assert a == b


def test_different_seed_differs(make_scenario):
    a = run_scenario(make_scenario(seed=1)).tally
    b = run_scenario(make_scenario(seed=2)).tally
    assert a != b


def test_invalid_duration_rejected(make_scenario):
    with pytest.raises(ValueError):
        make_scenario(duration_s=0.0)


def test_single_block_merge_is_identity(make_scenario):
    s = make_scenario()
    block = simulate_block(s, 0, s.total_rounds)
    merged = merge_parallel([block])
    assert merged.window_tallies == block.window_tallies


def test_two_blocks_equal_sequential(make_scenario):
    s = make_scenario()
    seq = run_scenario(s)
    par = run_scenario(s, parallel=True, block_rounds=s.total_rounds // 2 + 123)
    assert par.tally == seq.tally
    assert windows_to_csv(par.windows) == windows_to_csv(seq.windows)


def test_worker_processes_equal_sequential(make_scenario):
    s = make_scenario(rounds_per_window=20_000)
    seq = run_scenario(s)
    par = run_scenario(s, workers=2, parallel=True, block_rounds=7_000)
    assert par.tally == seq.tally


def test_eight_blocks_with_dead_time_close_to_sequential(make_scenario):
    s = make_scenario(receiver__detector__dead_time_us=50.0, rounds_per_window=400_000, protocol__mu=2.0)
    seq = run_scenario(s).tally
    par = run_scenario(s, parallel=True, block_rounds=s.total_rounds // 8).tally
    for a, b in [(seq.data.sum(), par.data.sum()), (seq.monitor.sum(), par.monitor.sum())]:
        assert abs(int(a) - int(b)) <= 0.001 * a


def test_overlapping_blocks_rejected(make_scenario):
    s = make_scenario()
    with pytest.raises(ValueError):
        merge_parallel([simulate_block(s, 0, 600), simulate_block(s, 500, 1000)])


def test_ideal_channel_jz_is_half():
    from cowqkd.scenario import scenario_from_dict

    s = scenario_from_dict(scenario_dict(**IDEAL, protocol__mu=30.0, receiver__t_B=1.0, rounds_per_window=500_000))
    assert gain_jz(run_scenario(s).tally) == pytest.approx(0.5, abs=1e-9)


def test_injected_flips_set_qber():
    from cowqkd.scenario import scenario_from_dict

    d = scenario_dict(**IDEAL, protocol__mu=60.0, receiver__t_B=1.0, rounds_per_window=500_000,
                      eve={"enabled": True, "tap_fraction_e": 0.5, "disturbance_delta": 0.06})
    t = run_scenario(scenario_from_dict(d)).tally
    n = int(t.data.sum())
    assert n == 1_000_000
    assert within_3_sigma(int(t.data[0, 0] + t.data[1, 1]), n, 0.03)
    assert qber_z(t) == pytest.approx(0.03, abs=3 * math.sqrt(0.03 * 0.97 / n))


def test_monitor_visibility_sets_ex():
    from cowqkd.scenario import scenario_from_dict

    d = scenario_dict(**{**IDEAL, "protocol__variant": "COW4", "protocol__decoy_fraction_f": 0.5},
                      protocol__mu=1.0, receiver__t_B=0.1, receiver__visibility_V0=0.98, rounds_per_window=500_000)
    s = scenario_from_dict(d)
    t = run_scenario(s).tally
    n_aa = int(t.monitor[U_AA].sum())
    assert within_3_sigma(int(t.monitor[U_AA, 1]), n_aa, 0.01)
    ex = error_x(t, normalization_factors(s.protocol.mu))
    assert abs(ex - 0.01) <= 3 * math.sqrt(0.01 * 0.99 / n_aa)


def test_default_phase_bound_small_on_ideal_channel():
    from cowqkd.scenario import scenario_from_dict

    d = scenario_dict(**{**IDEAL, "protocol__variant": "COW4", "protocol__decoy_fraction_f": 0.1},
                      protocol__mu=0.5, receiver__visibility_V0=0.99, duration_s=12.0, window_s=12.0,
                      rounds_per_window=10_000_000)
    s = scenario_from_dict(d)
    t = run_scenario(s).tally
    nf = normalization_factors(s.protocol.mu)
    assert phase_error_upper(t, estimate_bounds(t, nf), nf) <= 0.01


def test_abort_propagation(make_scenario):
    r = run_scenario(make_scenario(receiver__detector__dark_count_prob=0.01, protocol__mu=0.05))
    assert all(w.keyrate_bps == 0.0 for w in r.windows if w.qber is None or w.qber > 0.12)
    assert any(w.aborted for w in r.windows)


def test_qber_grows_with_tap_fraction(make_scenario):
    q = []
    for e in (0.0, 0.25, 0.5):
        s = make_scenario(eve={"enabled": True, "tap_fraction_e": e, "disturbance_delta": 0.2},
                          rounds_per_window=200_000)
        q.append(qber_z(run_scenario(s).tally))
    assert q[0] < q[1] < q[2]


def test_keyrate_falls_with_distance(make_scenario):
    rates = [run_scenario(make_scenario(channel__distance_km=d, channel__kappa_db_per_km=3.0,
                                        rounds_per_window=200_000)).aggregate()["keyrate_mean"]
             for d in (1.0, 2.0, 3.5)]
    assert rates[0] > rates[1] > rates[2]


# ---------------------------------------------------------------- sweeps


def test_set_path_creates_tables_and_copies():
    base = {"a": {"b": 1}}
    out = set_path(base, "x.y.z", 3)
    assert out["x"]["y"]["z"] == 3 and "x" not in base
    with pytest.raises(KeyError):
        set_path({"a": 1}, "a.b", 2)


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec("s", scenario_dict(), ("channel.distance_km", ()))
    with pytest.raises(ValueError):
        SweepSpec("s", scenario_dict(), ("channel.distance_km", (1.0,)), replicates=0)
    with pytest.raises(ValueError):
        SweepSpec("s", scenario_dict(), ("channel.distance_km", ("far",)))


def test_degenerate_sweep_equals_run():
    from cowqkd.scenario import scenario_from_dict

    d = scenario_dict()
    spec = SweepSpec("one", d, ("channel.distance_km", (1.0,)))
    (row,) = run_sweep(spec)
    agg = run_scenario(scenario_from_dict(d)).aggregate()
    for k, v in agg.items():
        assert row[k] == v


def test_replicates_share_seeds_across_cells():
    assert replicate_seed(10, 0) == 10 and replicate_seed(10, 2) == 12
    assert replicate_seed(2**64 - 1, 1) == 0


def test_cell_failure_is_recorded():
    spec = SweepSpec("bad", scenario_dict(), ("receiver.detector.eta", (0.1, 1.5)))
    rows = run_sweep(spec)
    assert rows[0]["error"] == "" and rows[0]["qber_mean"] is not None
    assert "eta" in rows[1]["error"]
    csv_text = sweep_to_csv(spec, rows)
    assert csv_text.splitlines()[0].startswith("cell,receiver.detector.eta,qber_mean")
    assert len(csv_text.splitlines()) == 3


def test_two_axis_cells():
    spec = SweepSpec("g", scenario_dict(), ("channel.distance_km", (0.0, 1.0)),
                     ("eve.tap_fraction_e", (0.0, 0.2, 0.4)))
    cells = spec.cells()
    assert len(cells) == 6
    raw = cell_scenario(spec, *cells[-1])
    assert raw["channel"]["distance_km"] == 1.0 and raw["eve"]["tap_fraction_e"] == 0.4
