"""KME node: ETSI GS QKD 014 key delivery over HTTP.

One service type serves both roles.  The master KME answers ``enc_keys``
for its local (master) SAE and announces every delivered key to the slave
KME before committing; the slave KME answers ``dec_keys`` for its local
(slave) SAE.
"""
from __future__ import annotations

import base64
import contextlib
import hmac
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import httpx
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .auth import SharedSecretAuth
from .feed import KeyFeed
from .store import AuthError, BadRequest, KeyStore, KmsError, NotFound, PeerUnavailable

API = "/api/v1/keys"
PEER_RESERVE = "/internal/v1/reserve"


@dataclass
class NodeConfig:
    role: str
    kme_id: str
    peer_kme_id: str
    local_sae: str
    peer_sae: str
    key_size: int = 256
    max_key_count: int = 10_000
    max_key_per_request: int = 128
    min_key_size: int = 8
    max_key_size: int = 4096
    peer_token: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("master", "slave"):
            raise ValueError(f"role must be 'master' or 'slave', got {self.role!r}")
        if self.key_size % 8 or not self.min_key_size <= self.key_size <= self.max_key_size:
            raise ValueError("invalid key size limits")

    @property
    def master_sae(self) -> str:
        return self.local_sae if self.role == "master" else self.peer_sae

    @property
    def slave_sae(self) -> str:
        return self.peer_sae if self.role == "master" else self.local_sae


class LocalPeer:
    """In-process link to the slave KME."""

    def __init__(self, node: "KmeNode"):
        self.node = node

    def announce(self, entries, master_sae, slave_sae):
        self.node.store.accept(entries, master_sae, slave_sae)


class HttpPeer:
    def __init__(self, url: str, token: str, client: Optional[httpx.Client] = None, timeout: float = 5.0):
        self.url = url.rstrip("/")
        self.token = token
        self.client = client or httpx.Client(timeout=timeout)

    def announce(self, entries, master_sae, slave_sae):
        try:
            r = self.client.post(
                self.url + PEER_RESERVE,
                json={"master_SAE_ID": master_sae, "slave_SAE_ID": slave_sae, "keys": list(entries)},
                headers={"Authorization": f"Bearer {self.token}"},
            )
        except httpx.HTTPError as exc:
            raise PeerUnavailable(f"slave KME unreachable: {exc}") from exc
        if r.status_code != 200:
            raise PeerUnavailable(f"slave KME refused key announcement: {r.status_code} {r.text}")


class KmeNode:
    def __init__(self, cfg: NodeConfig, store: KeyStore, auth=None, peer=None, feed: Optional[KeyFeed] = None):
        self.cfg = cfg
        self.store = store
        self.auth = auth or SharedSecretAuth({})
        self.peer = peer
        self.feed = feed

    def _caller(self, headers: Mapping[str, str], tls=None) -> str:
        sae = self.auth.authenticate(headers, tls)
        if sae != self.cfg.local_sae:
            raise AuthError(f"SAE {sae} is not served by {self.cfg.kme_id}")
        return sae

    def _check_peer(self, sae_id: str):
        if sae_id != self.cfg.peer_sae:
            raise NotFound(f"unknown SAE ID {sae_id}")

    def status(self, headers, peer_sae: str, tls=None) -> dict:
        self._caller(headers, tls)
        self._check_peer(peer_sae)
        c = self.cfg
        return {
            "source_KME_ID": c.kme_id if c.role == "master" else c.peer_kme_id,
            "target_KME_ID": c.peer_kme_id if c.role == "master" else c.kme_id,
            "master_SAE_ID": c.master_sae,
            "slave_SAE_ID": c.slave_sae,
            "key_size": c.key_size,
            "stored_key_count": self.store.stored_count() * self.store.stream.unit_bits // c.key_size,
            "max_key_count": c.max_key_count,
            "max_key_per_request": c.max_key_per_request,
            "max_key_size": c.max_key_size,
            "min_key_size": c.min_key_size,
            "max_SAE_ID_count": 0,
        }

    def enc_keys(self, headers, slave_sae: str, number=None, size=None, tls=None) -> dict:
        caller = self._caller(headers, tls)
        self._check_peer(slave_sae)
        if self.cfg.role != "master":
            raise BadRequest("enc_keys is served by the master KME")
        number = 1 if number is None else _as_int(number, "number")
        size = self.cfg.key_size if size is None else _as_int(size, "size")
        if number < 0 or number > self.cfg.max_key_per_request:
            raise BadRequest(f"number must lie in [0, {self.cfg.max_key_per_request}]")
        if size % 8:
            raise BadRequest("size must be a multiple of 8")
        if not self.cfg.min_key_size <= size <= self.cfg.max_key_size:
            raise BadRequest(f"size must lie in [{self.cfg.min_key_size}, {self.cfg.max_key_size}]")

        def announce(entries):
            if self.peer is not None:
                self.peer.announce(entries, caller, slave_sae)

        records = self.store.reserve(number, size, caller, slave_sae, announce)
        return _key_container(records)

    def dec_keys(self, headers, master_sae: str, key_ids: Sequence[str], tls=None) -> dict:
        caller = self._caller(headers, tls)
        self._check_peer(master_sae)
        if self.cfg.role != "slave":
            raise BadRequest("dec_keys is served by the slave KME")
        if not key_ids:
            raise BadRequest("no key_ID given")
        return _key_container(self.store.deliver(list(key_ids), caller, master_sae))

    def accept_announcement(self, token: str, body: dict) -> dict:
        if not self.cfg.peer_token or not hmac.compare_digest(token.encode(), self.cfg.peer_token.encode()):
            raise AuthError("invalid KME credentials")
        if self.cfg.role != "slave":
            raise BadRequest("only the slave KME accepts announcements")
        if body.get("master_SAE_ID") != self.cfg.peer_sae or body.get("slave_SAE_ID") != self.cfg.local_sae:
            raise NotFound("announcement for an unknown SAE pair")
        self.store.accept(body.get("keys", []), body["master_SAE_ID"], body["slave_SAE_ID"])
        return {"accepted": len(body.get("keys", []))}

    def metrics(self) -> dict:
        out = {"kme_id": self.cfg.kme_id, "role": self.cfg.role, **self.store.counts()}
        if self.feed is not None:
            out.update(self.feed.current())
        return out


def _as_int(v, name: str) -> int:
    try:
        if isinstance(v, bool):
            raise TypeError
        return int(v)
    except (TypeError, ValueError):
        raise BadRequest(f"{name} must be an integer") from None


def _key_container(records) -> dict:
    return {"keys": [{"key_ID": r.key_id, "key": base64.b64encode(r.key_bytes).decode()} for r in records]}


def create_app(node: KmeNode, on_shutdown=None) -> FastAPI:
    @contextlib.asynccontextmanager
    async def lifespan(app):
        yield
        if on_shutdown is not None:
            on_shutdown()

    app = FastAPI(title=f"KME {node.cfg.kme_id}", lifespan=lifespan)
    app.state.node = node

    @app.exception_handler(KmsError)
    async def _kms_error(request: Request, exc: KmsError):
        return JSONResponse({"message": str(exc)}, status_code=exc.status_code)

    @app.exception_handler(RequestValidationError)
    async def _validation(request: Request, exc: RequestValidationError):
        return JSONResponse({"message": "bad request", "details": exc.errors()}, status_code=400)

    def tls(request: Request):
        return request.scope.get("extensions", {}).get("tls")

    async def body(request: Request) -> dict:
        if request.method != "POST":
            return {}
        raw = await request.body()
        if not raw:
            return {}
        try:
            data = await request.json()
        except ValueError:
            raise BadRequest("body is not valid JSON") from None
        if not isinstance(data, dict):
            raise BadRequest("body must be a JSON object")
        return data

    @app.get(API + "/{slave_sae_id}/status")
    async def get_status(slave_sae_id: str, request: Request):
        return await run_in_threadpool(node.status, request.headers, slave_sae_id, tls(request))

    @app.api_route(API + "/{slave_sae_id}/enc_keys", methods=["GET", "POST"])
    async def enc_keys(slave_sae_id: str, request: Request):
        data = await body(request)
        q = request.query_params
        number = data.get("number", q.get("number"))
        size = data.get("size", q.get("size"))
        return await run_in_threadpool(node.enc_keys, request.headers, slave_sae_id, number, size, tls(request))

    @app.api_route(API + "/{master_sae_id}/dec_keys", methods=["GET", "POST"])
    async def dec_keys(master_sae_id: str, request: Request):
        data = await body(request)
        if request.method == "POST":
            entries = data.get("key_IDs", [])
            if not isinstance(entries, list):
                raise BadRequest("key_IDs must be a list")
            ids = [e.get("key_ID") if isinstance(e, dict) else e for e in entries]
        else:
            ids = request.query_params.getlist("key_ID")
        return await run_in_threadpool(node.dec_keys, request.headers, master_sae_id, ids, tls(request))

    @app.post(PEER_RESERVE)
    async def reserve(request: Request):
        auth = request.headers.get("authorization", "")
        token = auth[len("Bearer "):] if auth.startswith("Bearer ") else ""
        return await run_in_threadpool(node.accept_announcement, token, await body(request))

    @app.get("/metrics")
    async def metrics():
        return await run_in_threadpool(node.metrics)

    return app


_NODE_KEYS = {
    "role", "kme_id", "peer_kme_id", "local_sae", "peer_sae", "key_size", "max_key_count",
    "max_key_per_request", "min_key_size", "max_key_size", "peer_token",
    "host", "port", "store", "pairing_secret", "peer_url", "auth", "feed", "tls",
}


def build_node(d: dict, out_dir, peer=None) -> tuple:
    """Assemble a node from a config mapping; returns ``(node, host, port)``.

    The store path is resolved inside ``out_dir``.  ``feed`` selects the
    key-rate source: ``rate_bps`` (constant), ``replay`` (a windows.csv) or
    ``scenario`` (simulated at startup).
    """
    from pathlib import Path

    from .auth import make_authenticator
    from .feed import RateSchedule
    from .store import KeyStream

    unknown = set(d) - _NODE_KEYS
    if unknown:
        raise ValueError(f"unknown node field(s): {', '.join(sorted(unknown))}")
    for k in ("role", "kme_id", "peer_kme_id", "local_sae", "peer_sae", "pairing_secret"):
        if k not in d:
            raise ValueError(f"missing node field {k!r}")
    cfg = NodeConfig(**{k: d[k] for k in (
        "role", "kme_id", "peer_kme_id", "local_sae", "peer_sae", "key_size", "max_key_count",
        "max_key_per_request", "min_key_size", "max_key_size", "peer_token") if k in d})
    store_path = d.get("store", ":memory:")
    if store_path != ":memory:":
        store_path = str(Path(out_dir) / store_path)
    store = KeyStore(KeyStream(d["pairing_secret"].encode()), store_path, capacity=cfg.max_key_count)

    feed = None
    fcfg = dict(d.get("feed", {}))
    if fcfg:
        if "rate_bps" in fcfg:
            schedule = RateSchedule.constant(float(fcfg["rate_bps"]))
        elif "replay" in fcfg:
            schedule = RateSchedule.from_windows_csv(fcfg["replay"])
        elif "scenario" in fcfg:
            from ..engine import run_scenario
            from ..scenario import load_scenario

            schedule = RateSchedule.from_run(run_scenario(load_scenario(fcfg["scenario"])))
        else:
            raise ValueError("[feed] needs one of rate_bps, replay, scenario")
        feed = KeyFeed(store, schedule)
        if fcfg.get("prefill_s"):
            feed.advance(float(fcfg["prefill_s"]))

    if peer is None and cfg.role == "master" and d.get("peer_url"):
        peer = HttpPeer(d["peer_url"], cfg.peer_token)
    node = KmeNode(cfg, store, make_authenticator(d.get("auth", {})), peer, feed)
    return node, d.get("host", "127.0.0.1"), int(d.get("port", 8000))
