"""Command-line entry point: simulate, sweep, serve, demo.

Exit codes: 0 ok, 1 invalid input, 2 runtime failure, 3 partial failure.
Nothing is written to ``--out`` unless the inputs validate.
"""
from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
MANIFEST = "run_meta.json"

log = logging.getLogger("cowqkd")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _manifest(argv, out: Path, seed=None, scenario_hash=None, **extra) -> dict:
    return {
        "command": ["cowqkd", *argv],
        "code_version": __version__,
        "seed": seed,
        "scenario_hash": scenario_hash,
        "out_dir": str(out),
        **extra,
    }


def _write_outputs(out: Path, files: dict):
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_RUNTIME) from exc


def _read_config(path: str) -> dict:
    from .scenario import ScenarioError, read_toml

    try:
        return read_toml(Path(path))
    except ScenarioError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from exc


# ------------------------------------------------------------------ simulate


def cmd_simulate(args, argv) -> int:
    from .engine import run_metadata, run_scenario
    from .metrics import windows_to_csv
    from .scenario import ScenarioError, load_scenario, scenario_hash

    try:
        s = load_scenario(args.scenario)
        if args.seed is not None:
            s = s.with_seed(args.seed)
    except ScenarioError as exc:
        raise CliError(f"invalid scenario: {exc}", EXIT_VALIDATION) from exc

    try:
        result = run_scenario(s, workers=args.workers, parallel=args.workers > 1)
    except Exception as exc:
        raise CliError(f"simulation failed: {type(exc).__name__}: {exc}", EXIT_RUNTIME) from exc

    meta = _manifest(argv, args.out, s.seed, scenario_hash(s), run=run_metadata(s, result))
    _write_outputs(args.out, {
        "windows.csv": windows_to_csv(result.windows),
        MANIFEST: json.dumps(meta, indent=2, sort_keys=True) + "\n",
    })
    agg = result.aggregate()
    print(f"{s.name}: {len(result.windows)} windows, QBER {_fmt(agg['qber_window_mean'])}, "
          f"key rate {_fmt(agg['keyrate_mean'], '.1f')} bit/s, aborted {agg['abort_fraction']:.0%}")
    print(f"wrote {args.out / 'windows.csv'}")
    return EXIT_OK


def _fmt(x, spec=".4f"):
    return "n/a" if x is None else format(x, spec)


# ------------------------------------------------------------------- sweep


def cmd_sweep(args, argv) -> int:
    from .engine import run_sweep, sweep_to_csv
    from .scenario import ScenarioError, load_sweep, scenario_from_dict, scenario_hash

    try:
        spec = load_sweep(args.sweep)
        base_hash = scenario_hash(scenario_from_dict(spec.base))
    except ScenarioError as exc:
        raise CliError(f"invalid sweep: {exc}", EXIT_VALIDATION) from exc

    rows = run_sweep(spec, workers=args.workers)
    failed = [r for r in rows if r["error"]]
    meta = _manifest(
        argv, args.out, spec.base.get("seed", 0), base_hash,
        sweep={"name": spec.name, "axis1": list(spec.axis1[:1]) + [list(spec.axis1[1])],
               "axis2": None if spec.axis2 is None else [spec.axis2[0], list(spec.axis2[1])],
               "replicates": spec.replicates, "base": spec.base, "failed_cells": len(failed)},
    )
    _write_outputs(args.out, {
        "sweep.csv": sweep_to_csv(spec, rows),
        MANIFEST: json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n",
    })
    for r in failed:
        log.error("cell %s failed: %s", r["cell"], r["error"])
    print(f"{spec.name}: {len(rows)} cells x {spec.replicates} replicates, {len(failed)} failed")
    print(f"wrote {args.out / 'sweep.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


# ------------------------------------------------------------------- serve


def _check_port(host: str, port: int):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError as exc:
            raise CliError(f"cannot listen on {host}:{port}: {exc.strerror}", EXIT_RUNTIME) from exc


def cmd_serve(args, argv) -> int:
    from .kms.service import build_node, create_app
    from .kms.store import StoreCorrupt

    cfg = _read_config(args.config)
    base = Path(args.config).resolve().parent
    if args.role:
        if cfg.get("role", args.role) != args.role:
            raise CliError(f"--role {args.role} contradicts role {cfg['role']!r} in {args.config}", EXIT_VALIDATION)
        cfg["role"] = args.role
    feed = dict(cfg.get("feed", {}))
    for key in ("replay", "scenario"):
        if key in feed and str(feed[key]).endswith((".csv", ".toml")):
            feed[key] = str((base / feed[key]).resolve())
    cfg["feed"] = feed
    tls = cfg.get("tls")

    host, port = cfg.get("host", "127.0.0.1"), int(cfg.get("port", 8000))
    _check_port(host, port)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        node, host, port = build_node(cfg, args.out)
    except StoreCorrupt as exc:
        raise CliError(f"key store unusable: {exc}", EXIT_RUNTIME) from exc
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid node config: {exc}", EXIT_VALIDATION) from exc

    import uvicorn

    from .kms.auth import tls_server_kwargs

    def shutdown():
        if node.feed is not None:
            node.feed.stop()
        node.store.close()
        log.info("key store closed")

    app = create_app(node, on_shutdown=shutdown)
    if node.feed is not None:
        node.feed.start(float(feed.get("tick_s", 1.0)))
    kwargs = {}
    if tls:
        kwargs = tls_server_kwargs(
            str(base / tls["certfile"]), str(base / tls["keyfile"]), str(base / tls["ca_file"])
        )
    log.info("%s KME %s serving SAE %s on %s:%d", node.cfg.role, node.cfg.kme_id, node.cfg.local_sae, host, port)
    uvicorn.run(app, host=host, port=port, log_level="warning", **kwargs)
    return EXIT_OK


# -------------------------------------------------------------------- demo


def cmd_demo(args, argv) -> int:
    from .kms.client import Etsi014Client
    from .kms.demo import DemoError, Inbox, Node1, Node2, algorithm1_demo, check_reachable, transcript_csv

    cfg = _read_config(args.config)
    try:
        m, s = cfg["master"], cfg["slave"]
        master = Etsi014Client(m["url"], m["sae_id"], m.get("token", ""))
        slave = Etsi014Client(s["url"], s["sae_id"], s.get("token", ""))
    except (KeyError, TypeError) as exc:
        raise CliError(f"demo config needs [master] and [slave] with url and sae_id: missing {exc}",
                       EXIT_VALIDATION) from exc
    if args.payload_file:
        try:
            payload = Path(args.payload_file).read_bytes()
        except OSError as exc:
            raise CliError(f"cannot read payload: {exc}", EXIT_VALIDATION) from exc
    else:
        payload = cfg.get("payload", "connection data").encode()
    iterations = args.iterations
    if args.duration is not None:
        iterations = int(args.duration // args.interval) if args.interval > 0 else iterations
    if iterations < 0 or args.interval < 0:
        raise CliError("iterations and interval must be non-negative", EXIT_VALIDATION)

    try:
        check_reachable(Node1(master, s["sae_id"]), Node2(slave, m["sae_id"], None))
    except DemoError as exc:
        raise CliError(f"KME unreachable: {exc}", EXIT_RUNTIME) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    inbox = Inbox(str(args.out / "inbox.sqlite"))
    node1, node2 = Node1(master, s["sae_id"]), Node2(slave, m["sae_id"], inbox)

    def show(i, plaintext):
        print(f"[{i}] {plaintext.decode(errors='replace')}")

    try:
        rows = algorithm1_demo(node1, node2, payload, iterations, args.interval, on_plaintext=show)
    except DemoError as exc:
        raise CliError(f"KME unreachable: {exc}", EXIT_RUNTIME) from exc
    finally:
        inbox.close()
    for r in rows:
        if r.status != "ok":
            log.error("iteration %d failed: %s", r.iter, r.detail)
    failed = sum(r.status != "ok" for r in rows)
    meta = _manifest(argv, args.out, iterations=iterations, interval_s=args.interval,
                     key_bits=256, failed=failed)
    _write_outputs(args.out, {
        "transcript.csv": transcript_csv(rows),
        MANIFEST: json.dumps(meta, indent=2, sort_keys=True) + "\n",
    })
    print(f"{len(rows) - failed}/{len(rows)} iterations ok; wrote {args.out / 'transcript.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


# -------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cowqkd", description="COW QKD simulator and ETSI-014 key service")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario, write windows.csv")
    sim.add_argument("--scenario", required=True, help="scenario .toml file or shipped name")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", type=Path, required=True)
    sim.add_argument("--workers", type=int, default=1)
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run a parameter grid, write sweep.csv")
    sw.add_argument("--sweep", "--scenario", dest="sweep", required=True, help="sweep .toml file or shipped name")
    sw.add_argument("--out", type=Path, required=True)
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    sv = sub.add_parser("serve", help="run a KME node")
    sv.add_argument("--role", choices=["master", "slave"])
    sv.add_argument("--config", required=True)
    sv.add_argument("--out", type=Path, default=Path("."), help="directory holding the key store")
    sv.set_defaults(func=cmd_serve)

    dm = sub.add_parser("demo", help="encrypt/decrypt loop between two SAEs")
    dm.add_argument("--config", required=True)
    dm.add_argument("--iterations", type=int, default=10)
    dm.add_argument("--interval", type=float, default=1.0, help="seconds between iterations")
    dm.add_argument("--duration", type=float, help="run for this many seconds instead of --iterations")
    dm.add_argument("--payload-file")
    dm.add_argument("--out", type=Path, required=True)
    dm.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "serve" else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        return args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
