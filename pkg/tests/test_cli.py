import csv
import io
import json
import socket
import threading
import time

import pytest
import uvicorn

from cowqkd.cli import main
from cowqkd.kms import KeyStore, KeyStream, KmeNode, NodeConfig, create_app
from cowqkd.kms.auth import SharedSecretAuth
from cowqkd.kms.service import HttpPeer

SMALL = """\
name = "small"
seed = 3
duration_s = 2.0
window_s = 1.0
rounds_per_window = 20000

[protocol]
variant = "COW4"
mu = 0.3

[channel]
distance_km = 1.0

[receiver.detector]
eta = {eta}
"""


def _scenario(tmp_path, eta=0.1, name="s.toml"):
    p = tmp_path / name
    p.write_text(SMALL.format(eta=eta))
    return p


def test_simulate_same_seed_same_bytes(tmp_path, capsys):
    sc = _scenario(tmp_path)
    assert main(["simulate", "--scenario", str(sc), "--seed", "42", "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--scenario", str(sc), "--seed", "42", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "windows.csv").read_bytes()
    assert a == (tmp_path / "b" / "windows.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(a.decode())))
    assert len(rows) == 2
    meta = json.loads((tmp_path / "a" / "run_meta.json").read_text())
    assert meta["seed"] == 42 and meta["scenario_hash"] and meta["code_version"]
    assert "windows" in capsys.readouterr().out


def test_simulate_different_seed_differs(tmp_path):
    sc = _scenario(tmp_path)
    main(["simulate", "--scenario", str(sc), "--seed", "1", "--out", str(tmp_path / "a")])
    main(["simulate", "--scenario", str(sc), "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "windows.csv").read_bytes() != (tmp_path / "b" / "windows.csv").read_bytes()


def test_simulate_workers_do_not_change_output(tmp_path):
    sc = _scenario(tmp_path)
    main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "a")])
    main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "b"), "--workers", "2"])
    assert (tmp_path / "a" / "windows.csv").read_bytes() == (tmp_path / "b" / "windows.csv").read_bytes()


def test_invalid_efficiency_exits_1_without_output(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["simulate", "--scenario", str(_scenario(tmp_path, eta=1.2)), "--out", str(out)])
    assert code == 1
    assert not out.exists()
    assert "eta" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["name = \n", "name = 'x'\n[protocol]\nmu = 'lots'\n", "[[[", "bogus_key = 1\n"])
def test_malformed_scenario_exits_1(tmp_path, text):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    assert main(["simulate", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_missing_file_and_bad_args_exit_1(tmp_path):
    assert main(["simulate", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 1
    assert main(["simulate", "--out", str(tmp_path / "o")]) == 1
    assert main(["frobnicate"]) == 1


def _sweep(tmp_path, values):
    sc = _scenario(tmp_path)
    p = tmp_path / "sw.toml"
    p.write_text(f'name = "t"\nbase = "{sc}"\nreplicates = 2\n\n[axis1]\npath = "receiver.detector.eta"\n'
                 f"values = {values}\n")
    return p


def test_sweep_writes_table(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--sweep", str(_sweep(tmp_path, [0.05, 0.1])), "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "sweep.csv").read_text())))
    assert len(rows) == 2
    assert {"qber_mean", "qber_std", "keyrate_mean"} <= set(rows[0])
    assert json.loads((out / "run_meta.json").read_text())["sweep"]["failed_cells"] == 0


def test_sweep_partial_failure_exits_3(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--sweep", str(_sweep(tmp_path, [0.1, 1.5])), "--out", str(out)]) == 3
    rows = list(csv.DictReader(io.StringIO((out / "sweep.csv").read_text())))
    assert rows[0]["error"] == "" and rows[1]["error"]


def test_sweep_invalid_first_cell_exits_1(tmp_path):
    assert main(["sweep", "--sweep", str(_sweep(tmp_path, [1.5])), "--out", str(tmp_path / "o")]) == 1


def test_shipped_scenario_by_name(tmp_path, monkeypatch):
    from cowqkd import scenario

    s = scenario.load_scenario("cow3_1km")
    assert s.protocol.variant.name == "COW3"


# ---------------------------------------------------------------- demo


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class _Server:
    def __init__(self, app, port):
        self.server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error"))
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started and time.time() < deadline:
            time.sleep(0.02)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(5)


@pytest.fixture
def live_kmes():
    pm, ps = _free_port(), _free_port()
    auth = SharedSecretAuth({"SAE_1": "t1", "SAE_2": "t2"})
    slave = KmeNode(NodeConfig("slave", "KB", "KA", "SAE_2", "SAE_1", peer_token="link"),
                    KeyStore(KeyStream(b"s")), auth)
    master = KmeNode(NodeConfig("master", "KA", "KB", "SAE_1", "SAE_2"), KeyStore(KeyStream(b"s")), auth,
                     HttpPeer(f"http://127.0.0.1:{ps}", "link"))
    with _Server(create_app(slave), ps), _Server(create_app(master), pm):
        yield master, pm, ps


def _demo_cfg(tmp_path, pm, ps):
    p = tmp_path / "demo.toml"
    p.write_text(f'payload = "host=db.internal user=app"\n'
                 f'[master]\nurl = "http://127.0.0.1:{pm}"\nsae_id = "SAE_1"\ntoken = "t1"\n'
                 f'[slave]\nurl = "http://127.0.0.1:{ps}"\nsae_id = "SAE_2"\ntoken = "t2"\n')
    return p


def test_demo_end_to_end(tmp_path, live_kmes, capsys):
    master, pm, ps = live_kmes
    master.store.add_units(3)
    out = tmp_path / "o"
    code = main(["demo", "--config", str(_demo_cfg(tmp_path, pm, ps)), "--iterations", "3",
                 "--interval", "0.1", "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert printed.count("host=db.internal user=app") == 3
    rows = list(csv.DictReader(io.StringIO((out / "transcript.csv").read_text())))
    assert [r["status"] for r in rows] == ["ok"] * 3
    assert (out / "inbox.sqlite").exists()


def test_demo_depletion_exits_3(tmp_path, live_kmes):
    master, pm, ps = live_kmes
    master.store.add_units(1)
    out = tmp_path / "o"
    code = main(["demo", "--config", str(_demo_cfg(tmp_path, pm, ps)), "--iterations", "2",
                 "--interval", "0", "--out", str(out)])
    assert code == 3
    rows = list(csv.DictReader(io.StringIO((out / "transcript.csv").read_text())))
    assert [r["status"] for r in rows] == ["ok", "failed"]


def test_demo_unreachable_exits_2(tmp_path):
    out = tmp_path / "o"
    cfg = _demo_cfg(tmp_path, _free_port(), _free_port())
    assert main(["demo", "--config", str(cfg), "--iterations", "1", "--out", str(out)]) == 2
    assert not out.exists()


def test_serve_port_conflict_exits_2(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        cfg = tmp_path / "node.toml"
        cfg.write_text(f'role = "slave"\nkme_id = "KB"\npeer_kme_id = "KA"\nlocal_sae = "S2"\npeer_sae = "S1"\n'
                       f'pairing_secret = "x"\nport = {port}\n')
        assert main(["serve", "--role", "slave", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_serve_bad_config_exits_1(tmp_path):
    cfg = tmp_path / "node.toml"
    cfg.write_text('role = "slave"\nkme_id = "KB"\n')
    assert main(["serve", "--config", str(cfg), "--out", str(tmp_path)]) == 1
