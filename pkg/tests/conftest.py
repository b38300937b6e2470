import copy

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BASE = {
    "name": "t",
    "seed": 11,
    "duration_s": 20.0,
    "window_s": 10.0,
    "rounds_per_window": 50_000,
    "protocol": {"variant": "COW4", "mu": 0.5, "decoy_fraction_f": 0.1, "extinction_leak": 0.02},
    "channel": {"kappa_db_per_km": 0.35, "distance_km": 1.0, "extra_loss_db": 3.0},
    "receiver": {"t_B": 0.9, "visibility_V0": 0.98,
                 "detector": {"eta": 0.1, "dark_count_prob": 1e-5, "dead_time_us": 0.0}},
}


def scenario_dict(**overrides):
    """Small fast scenario; ``overrides`` use dotted keys with ``__``."""
    d = copy.deepcopy(BASE)
    for key, value in overrides.items():
        node = d
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


@pytest.fixture
def make_scenario():
    from cowqkd.scenario import scenario_from_dict

    return lambda **kw: scenario_from_dict(scenario_dict(**kw))


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")
