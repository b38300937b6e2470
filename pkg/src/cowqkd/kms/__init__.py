"""ETSI GS QKD 014 key delivery: key store, KME service, client and demo."""
from .store import (
    AuthError, BadRequest, Consumed, Depleted, KeyRecord, KeyStore, KeyStream, KmsError, NotFound,
    PeerUnavailable, StoreCorrupt,
)
from .service import KmeNode, LocalPeer, HttpPeer, NodeConfig, build_node, create_app

__all__ = [
    "AuthError", "BadRequest", "Consumed", "Depleted", "KeyRecord", "KeyStore", "KeyStream", "KmsError",
    "NotFound", "PeerUnavailable", "StoreCorrupt", "KmeNode", "LocalPeer", "HttpPeer", "NodeConfig",
    "build_node", "create_app",
]
