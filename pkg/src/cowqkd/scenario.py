"""Scenario and sweep files (TOML) and the shipped scenario library."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import ChannelModel, DetectorModel, EveModel
from .detection import ReceiverConfig
from .encoding import DEFAULT_PAIR_RATE_HZ, ProtocolConfig, mu_from_power
from .engine import Scenario, SweepSpec
from .metrics import MetricsConfig


class ScenarioError(ValueError):
    """Malformed or physically invalid scenario/sweep file."""


_TOP_KEYS = {
    "name", "duration_s", "seed", "window_s", "rounds_per_window",
    "protocol", "channel", "receiver", "eve", "metrics", "notes", "calibration",
}
_PROTOCOL_KEYS = {f.name for f in dataclasses.fields(ProtocolConfig)} | {"power_attenuation_db"}


def _data_dir(kind: str):
    return resources.files("cowqkd").joinpath("data", kind)


def shipped_names(kind: str = "scenarios") -> list:
    return sorted(p.name[:-5] for p in _data_dir(kind).iterdir() if p.name.endswith(".toml"))


def _locate(ref: Union[str, Path], kind: str, base_dir: Path = None) -> Path:
    p = Path(ref)
    if p.suffix == ".toml" or len(p.parts) > 1:
        if p.exists():
            return p
        if base_dir is not None and (base_dir / p).exists():
            return base_dir / p
        raise ScenarioError(f"file not found: {ref}")
    shipped = _data_dir(kind).joinpath(f"{ref}.toml")
    if shipped.is_file():
        return Path(str(shipped))
    raise ScenarioError(f"no {kind[:-1]} file or shipped {kind[:-1]} named {ref!r}")


def read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from exc
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc


def _build(section: str, cls, table: dict, allowed=None):
    allowed = allowed or {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - allowed
    if unknown:
        raise ScenarioError(f"[{section}] unknown field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{section}] {exc}") from exc


def protocol_from_dict(table: dict) -> ProtocolConfig:
    table = dict(table)
    unknown = set(table) - _PROTOCOL_KEYS
    if unknown:
        raise ScenarioError(f"[protocol] unknown field(s): {', '.join(sorted(unknown))}")
    att = table.pop("power_attenuation_db", None)
    if att is not None:
        if table.get("tx_power_dbm") is None:
            raise ScenarioError("[protocol] power_attenuation_db requires tx_power_dbm")
        rate = table.get("pair_rate_hz", DEFAULT_PAIR_RATE_HZ)
        table["mu"] = mu_from_power(table["tx_power_dbm"], att, pulse_width_s=0.5 / rate)
    return _build("protocol", ProtocolConfig, table)


def scenario_from_dict(d: dict) -> Scenario:
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown top-level field(s): {', '.join(sorted(unknown))}")
    for key in ("name", "protocol", "channel", "receiver"):
        if key not in d:
            raise ScenarioError(f"missing required field {key!r}")
    rx = dict(d["receiver"])
    det = _build("receiver.detector", DetectorModel, rx.pop("detector", {}))
    receiver = _build("receiver", ReceiverConfig, {**rx, "detector": det})
    kwargs = {k: d[k] for k in ("duration_s", "seed", "window_s", "rounds_per_window") if k in d}
    try:
        return Scenario(
            name=d["name"],
            protocol=protocol_from_dict(d["protocol"]),
            channel=_build("channel", ChannelModel, d["channel"]),
            receiver=receiver,
            eve=_build("eve", EveModel, d.get("eve", {})),
            metrics=_build("metrics", MetricsConfig, d.get("metrics", {})),
            **kwargs,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc


def scenario_to_dict(s: Scenario) -> dict:
    d = dataclasses.asdict(s)
    d["protocol"]["variant"] = s.protocol.variant.value
    return d


def load_scenario_dict(ref: Union[str, Path]) -> dict:
    return read_toml(_locate(ref, "scenarios"))


def load_scenario(ref: Union[str, Path]) -> Scenario:
    path = _locate(ref, "scenarios")
    d = read_toml(path)
    try:
        return scenario_from_dict(d)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def scenario_hash(s: Scenario) -> str:
    blob = json.dumps(scenario_to_dict(s), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _axis(d: dict, key: str):
    if key not in d:
        return None
    ax = d[key]
    if "path" not in ax or "values" not in ax:
        raise ScenarioError(f"[{key}] needs 'path' and 'values'")
    return ax["path"], tuple(ax["values"])


def sweep_from_dict(d: dict, base_dir: Path = None) -> SweepSpec:
    from .engine import cell_scenario, set_path

    if "base" not in d or "axis1" not in d:
        raise ScenarioError("sweep needs 'base' and [axis1]")
    base = d["base"]
    if isinstance(base, str):
        base = read_toml(_locate(base, "scenarios", base_dir))
    for path, value in d.get("overrides", {}).items():
        try:
            base = set_path(base, path, value)
        except KeyError as exc:
            raise ScenarioError(f"[overrides] {exc.args[0]}") from exc
    scenario_from_dict(base)
    try:
        spec = SweepSpec(
            name=d.get("name", "sweep"),
            base=base,
            axis1=_axis(d, "axis1"),
            axis2=_axis(d, "axis2"),
            replicates=int(d.get("replicates", 1)),
        )
        # every axis must land on a real numeric field
        v1, v2 = spec.cells()[0]
        scenario_from_dict(cell_scenario(spec, v1, v2))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise ScenarioError(f"sweep axis: {exc}") from exc
        raise ScenarioError(str(exc)) from exc
    return spec


def load_sweep(ref: Union[str, Path]) -> SweepSpec:
    path = _locate(ref, "sweeps")
    try:
        return sweep_from_dict(read_toml(path), path.parent)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
