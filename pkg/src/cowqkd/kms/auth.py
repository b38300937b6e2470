"""Caller authentication for the KME API.

Two backends: a shared-secret one for tests and loopback deployments, and
a certificate one for mutual-TLS deployments where the transport has
already verified the client certificate.
"""
from __future__ import annotations

import hmac
import ssl
from typing import Mapping, Optional

from .store import AuthError

SAE_HEADER = "X-SAE-ID"


class SharedSecretAuth:
    """``X-SAE-ID`` plus ``Authorization: Bearer <token>`` per SAE."""

    def __init__(self, secrets: Mapping[str, str]):
        self.secrets = dict(secrets)

    def authenticate(self, headers: Mapping[str, str], tls: Optional[dict] = None) -> str:
        sae = headers.get(SAE_HEADER) or headers.get(SAE_HEADER.lower())
        auth = headers.get("Authorization") or headers.get("authorization") or ""
        if not sae or sae not in self.secrets or not auth.startswith("Bearer "):
            raise AuthError("missing or unknown SAE credentials")
        if not hmac.compare_digest(auth[len("Bearer "):].encode(), self.secrets[sae].encode()):
            raise AuthError("invalid SAE credentials")
        return sae


class CertificateAuth:
    """Identity from a TLS client certificate.

    The server must run with ``ssl.CERT_REQUIRED`` (see ``tls_server_kwargs``)
    so unauthenticated peers never reach the application.  When the ASGI
    server exposes the TLS extension, the certificate subject CN must
    equal the claimed SAE ID.
    """

    def __init__(self, allowed_saes):
        self.allowed = set(allowed_saes)

    def authenticate(self, headers: Mapping[str, str], tls: Optional[dict] = None) -> str:
        sae = headers.get(SAE_HEADER) or headers.get(SAE_HEADER.lower())
        if not sae or sae not in self.allowed:
            raise AuthError("unknown SAE")
        chain = (tls or {}).get("client_cert_chain")
        if chain:
            from cryptography import x509
            from cryptography.x509.oid import NameOID

            cert = x509.load_pem_x509_certificate(chain[0].encode() if isinstance(chain[0], str) else chain[0])
            cns = [a.value for a in cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)]
            if sae not in cns:
                raise AuthError("client certificate does not match SAE ID")
        return sae


def tls_server_kwargs(certfile: str, keyfile: str, ca_file: str) -> dict:
    """uvicorn keyword arguments enforcing mutual TLS."""
    return {
        "ssl_certfile": certfile,
        "ssl_keyfile": keyfile,
        "ssl_ca_certs": ca_file,
        "ssl_cert_reqs": ssl.CERT_REQUIRED,
    }


def make_authenticator(cfg: Mapping) -> object:
    mode = cfg.get("mode", "shared-secret")
    if mode == "shared-secret":
        return SharedSecretAuth(cfg.get("secrets", {}))
    if mode == "certificate":
        return CertificateAuth(cfg.get("allowed_saes", []))
    raise ValueError(f"unknown auth mode {mode!r}")
