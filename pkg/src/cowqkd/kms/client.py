"""Minimal ETSI GS QKD 014 client used by the demo SAEs."""
from __future__ import annotations

import base64
from typing import Optional, Sequence

import httpx

from .auth import SAE_HEADER
from .service import API


class KmsClientError(Exception):
    def __init__(self, status_code: int, message: str):
        super().__init__(f"{status_code}: {message}")
        self.status_code = status_code
        self.message = message

    @property
    def depleted(self) -> bool:
        return self.status_code == 503


class Etsi014Client:
    """One SAE talking to its own KME.

    ``client`` may be any ``httpx.Client`` (including a FastAPI
    ``TestClient``); otherwise one is created for ``base_url``.
    """

    def __init__(self, base_url: str, sae_id: str, token: str = "", client: Optional[httpx.Client] = None,
                 timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.sae_id = sae_id
        self.http = client or httpx.Client(timeout=timeout)
        self.headers = {SAE_HEADER: sae_id}
        if token:
            self.headers["Authorization"] = f"Bearer {token}"

    def _call(self, method: str, path: str, **kw) -> dict:
        try:
            r = self.http.request(method, self.base_url + path, headers=self.headers, **kw)
        except httpx.HTTPError as exc:
            raise KmsClientError(0, f"KME at {self.base_url} unreachable: {exc}") from exc
        if r.status_code != 200:
            try:
                msg = r.json().get("message", r.text)
            except ValueError:
                msg = r.text
            raise KmsClientError(r.status_code, msg)
        return r.json()

    def status(self, peer_sae: str) -> dict:
        return self._call("GET", f"{API}/{peer_sae}/status")

    def enc_keys(self, slave_sae: str, number: int = 1, size: Optional[int] = None) -> list:
        body = {"number": number}
        if size is not None:
            body["size"] = size
        return _decode(self._call("POST", f"{API}/{slave_sae}/enc_keys", json=body))

    def dec_keys(self, master_sae: str, key_ids: Sequence[str]) -> list:
        body = {"key_IDs": [{"key_ID": k} for k in key_ids]}
        return _decode(self._call("POST", f"{API}/{master_sae}/dec_keys", json=body))


def _decode(container: dict) -> list:
    return [(k["key_ID"], base64.b64decode(k["key"])) for k in container.get("keys", [])]
