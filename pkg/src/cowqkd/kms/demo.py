"""Connection-data encryption demo between two SAEs.

Node 1 takes a fresh key from the master KME, encrypts the payload with
AES-256-GCM and drops (key_ID, nonce, ciphertext) into node 2's inbox.
Node 2 fetches the same key from the slave KME by key_ID, decrypts and
stores the plaintext.  Each iteration is logged with the KMS response
times of both key requests.
"""
from __future__ import annotations

import csv
import io
import os
import sqlite3
import time
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .client import Etsi014Client, KmsClientError

TRANSCRIPT_HEADER = ("iter", "ts", "key_id", "enc_ms", "dec_ms", "status")
KEY_BITS = 256


class DemoError(RuntimeError):
    """The demo cannot start (a KME is unreachable or refuses the SAE)."""


@dataclass(frozen=True)
class TranscriptRow:
    iter: int
    ts: float
    key_id: str
    enc_ms: Optional[float]
    dec_ms: Optional[float]
    status: str
    detail: str = ""


class Inbox:
    """Node 2's persistent message store."""

    def __init__(self, path: str = ":memory:"):
        self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS messages (key_id TEXT PRIMARY KEY, nonce BLOB, ciphertext BLOB, "
            "plaintext BLOB, received_at REAL, decrypted_at REAL)"
        )

    def put(self, key_id: str, nonce: bytes, ciphertext: bytes):
        self._db.execute(
            "INSERT INTO messages (key_id, nonce, ciphertext, received_at) VALUES (?, ?, ?, ?)",
            (key_id, nonce, ciphertext, time.time()),
        )

    def get(self, key_id: str):
        return self._db.execute("SELECT nonce, ciphertext FROM messages WHERE key_id=?", (key_id,)).fetchone()

    def set_plaintext(self, key_id: str, plaintext: bytes):
        self._db.execute(
            "UPDATE messages SET plaintext=?, decrypted_at=? WHERE key_id=?", (plaintext, time.time(), key_id)
        )

    def plaintext(self, key_id: str) -> Optional[bytes]:
        row = self._db.execute("SELECT plaintext FROM messages WHERE key_id=?", (key_id,)).fetchone()
        return None if row is None else row[0]

    def close(self):
        self._db.close()


class Node1:
    def __init__(self, kme: Etsi014Client, slave_sae: str):
        self.kme = kme
        self.slave_sae = slave_sae

    def send(self, payload: bytes, inbox: Inbox, clock=time.perf_counter) -> tuple:
        t0 = clock()
        ((key_id, key),) = self.kme.enc_keys(self.slave_sae, 1, KEY_BITS)
        enc_ms = (clock() - t0) * 1e3
        nonce = os.urandom(12)
        inbox.put(key_id, nonce, AESGCM(key).encrypt(nonce, payload, key_id.encode()))
        return key_id, enc_ms


class Node2:
    def __init__(self, kme: Etsi014Client, master_sae: str, inbox: Inbox):
        self.kme = kme
        self.master_sae = master_sae
        self.inbox = inbox

    def receive(self, key_id: str, clock=time.perf_counter) -> tuple:
        t0 = clock()
        ((kid, key),) = self.kme.dec_keys(self.master_sae, [key_id])
        dec_ms = (clock() - t0) * 1e3
        nonce, ciphertext = self.inbox.get(key_id)
        plaintext = AESGCM(key).decrypt(nonce, ciphertext, kid.encode())
        self.inbox.set_plaintext(key_id, plaintext)
        return plaintext, dec_ms


def check_reachable(node1: Node1, node2: Node2):
    for kme, peer in ((node1.kme, node1.slave_sae), (node2.kme, node2.master_sae)):
        try:
            kme.status(peer)
        except KmsClientError as exc:
            raise DemoError(f"KME {kme.base_url} for SAE {kme.sae_id}: {exc.message}") from exc


def algorithm1_demo(
    node1: Node1,
    node2: Node2,
    payload: bytes,
    iterations: int,
    interval_s: float,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.time,
    on_plaintext: Optional[Callable[[int, bytes], None]] = None,
) -> list:
    """Run the encrypt/decrypt loop; consecutive iteration starts are at least ``interval_s`` apart."""
    if iterations < 0 or interval_s < 0:
        raise ValueError("iterations and interval must be non-negative")
    check_reachable(node1, node2)
    rows = []
    prev = None
    for i in range(1, iterations + 1):
        if prev is not None:
            target = prev + interval_s
            while clock() < target:
                sleep(target - clock())
        ts = prev = clock()
        key_id, enc_ms, dec_ms = "", None, None
        try:
            key_id, enc_ms = node1.send(payload, node2.inbox)
            plaintext, dec_ms = node2.receive(key_id)
            if plaintext != payload:
                raise ValueError("decrypted payload differs from the original")
            status, detail = "ok", ""
            if on_plaintext is not None:
                on_plaintext(i, plaintext)
        except KmsClientError as exc:
            status, detail = "failed", ("depleted: " if exc.depleted else "") + exc.message
        except (InvalidTag, ValueError, TypeError) as exc:
            status, detail = "failed", f"{type(exc).__name__}: {exc}"
        rows.append(TranscriptRow(i, ts, key_id, enc_ms, dec_ms, status, detail))
    return rows


def transcript_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSCRIPT_HEADER)
    for r in rows:
        w.writerow([
            r.iter, f"{r.ts:.6f}", r.key_id,
            "" if r.enc_ms is None else f"{r.enc_ms:.3f}",
            "" if r.dec_ms is None else f"{r.dec_ms:.3f}",
            r.status,
        ])
    return buf.getvalue()
