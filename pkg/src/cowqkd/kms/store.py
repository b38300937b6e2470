"""Key material stream and the persistent key store of one KME.

Both KMEs derive the same numbered key units from a shared pairing
secret, which stands in for the simulated quantum link: unit ``k`` is
identical on Alice's and Bob's side.  The engine only governs *when*
units become available (see ``feed``).  Delivered keys are built from
one or more consecutive units, so a key ID names the same bytes on both
nodes once the master has announced the composition to the slave.
"""
from __future__ import annotations

import hashlib
import hmac
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Optional, Sequence

KEY_NAMESPACE = uuid.UUID("6f1c7c0e-0b7d-4a4e-9f55-2f4c2a3c6b10")


class KmsError(Exception):
    status_code = 500


class BadRequest(KmsError):
    status_code = 400


class AuthError(KmsError):
    status_code = 401


class NotFound(KmsError):
    status_code = 404


class Consumed(KmsError):
    status_code = 409


class Depleted(KmsError):
    status_code = 503


class PeerUnavailable(KmsError):
    status_code = 503


class StoreCorrupt(KmsError):
    pass


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    key_bytes: bytes
    created_at: float
    consumed_by: Optional[str] = None


class KeyStream:
    """Deterministic numbered key units derived from a pairing secret."""

    def __init__(self, secret: bytes, unit_bits: int = 256):
        if unit_bits % 8 or unit_bits <= 0:
            raise ValueError("unit_bits must be a positive multiple of 8")
        self.secret = secret
        self.unit_bits = unit_bits

    def unit(self, index: int) -> tuple[str, bytes]:
        n = self.unit_bits // 8
        blocks = []
        ctr = 0
        while sum(map(len, blocks)) < n:
            blocks.append(hmac.new(self.secret, b"key" + index.to_bytes(8, "big") + ctr.to_bytes(4, "big"), hashlib.sha256).digest())
            ctr += 1
        material = b"".join(blocks)[:n]
        raw = bytearray(hmac.new(self.secret, b"id" + index.to_bytes(8, "big"), hashlib.sha256).digest()[:16])
        return str(uuid.UUID(bytes=bytes(raw), version=4)), material


def compose_key_id(unit_ids: Sequence[str], size_bits: int, unit_bits: int) -> str:
    if len(unit_ids) == 1 and size_bits == unit_bits:
        return unit_ids[0]
    return str(uuid.uuid5(KEY_NAMESPACE, ",".join(unit_ids) + f":{size_bits}"))


_SCHEMA = """
CREATE TABLE IF NOT EXISTS units (
    seq INTEGER PRIMARY KEY,
    unit_id TEXT UNIQUE NOT NULL,
    material BLOB NOT NULL,
    created_at REAL NOT NULL,
    state TEXT NOT NULL DEFAULT 'available'
);
CREATE TABLE IF NOT EXISTS keys (
    key_id TEXT PRIMARY KEY,
    unit_seqs TEXT NOT NULL,
    size_bits INTEGER NOT NULL,
    master_sae TEXT NOT NULL,
    slave_sae TEXT NOT NULL,
    created_at REAL NOT NULL,
    enc_delivered INTEGER NOT NULL DEFAULT 0,
    dec_delivered INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS meta (k TEXT PRIMARY KEY, v TEXT NOT NULL);
"""


class KeyStore:
    """FIFO buffer of key units plus the ledger of delivered keys (SQLite).

    All state changes run inside ``BEGIN IMMEDIATE`` transactions under a
    process-local lock, so a unit or key is never handed out twice.
    """

    def __init__(self, stream: KeyStream, path: str = ":memory:", capacity: int = 10_000):
        self.stream = stream
        self.capacity = capacity
        self.path = path
        self._lock = threading.RLock()
        try:
            self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
            self._db.executescript(_SCHEMA)
            self._db.execute("SELECT count(*) FROM units").fetchone()
        except sqlite3.DatabaseError as exc:
            raise StoreCorrupt(f"cannot open key store {path!r}: {exc}") from exc
        self._check_pairing()

    def _check_pairing(self):
        probe = self.stream.unit(0)[0]
        row = self._db.execute("SELECT v FROM meta WHERE k='pairing'").fetchone()
        if row is None:
            self._db.execute("INSERT INTO meta VALUES ('pairing', ?)", (probe,))
        elif row[0] != probe:
            raise StoreCorrupt(f"key store {self.path!r} belongs to a different pairing")

    def close(self):
        with self._lock:
            self._db.close()

    # -- feeding

    def next_index(self) -> int:
        row = self._db.execute("SELECT max(seq) FROM units").fetchone()
        return 0 if row[0] is None else row[0] + 1

    def stored_count(self) -> int:
        return self._db.execute("SELECT count(*) FROM units WHERE state='available'").fetchone()[0]

    def add_units(self, count: int, now: Optional[float] = None) -> int:
        """Append up to ``count`` new units; returns how many fit in capacity.

        Units that do not fit are discarded, but their stream indices are
        still consumed.
        """
        now = time.time() if now is None else now
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                start = self.next_index()
                room = max(self.capacity - self.stored_count(), 0)
                stored = min(room, count)
                for k in range(start, start + count):
                    uid, mat = self.stream.unit(k)
                    state = "available" if k - start < stored else "discarded"
                    self._db.execute(
                        "INSERT INTO units (seq, unit_id, material, created_at, state) VALUES (?, ?, ?, ?, ?)",
                        (k, uid, mat, now, state),
                    )
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
            return stored

    def _materialize(self, seqs: Sequence[int], now: float):
        """Create missing units up to ``max(seqs)`` (slave catching up)."""
        top = max(seqs)
        start = self.next_index()
        for k in range(start, top + 1):
            uid, mat = self.stream.unit(k)
            self._db.execute(
                "INSERT INTO units (seq, unit_id, material, created_at, state) VALUES (?, ?, ?, ?, 'available')",
                (k, uid, mat, now),
            )

    def _assemble(self, seqs: Sequence[int], size_bits: int) -> bytes:
        rows = dict(self._db.execute(
            f"SELECT seq, material FROM units WHERE seq IN ({','.join('?' * len(seqs))})", list(seqs)
        ).fetchall())
        return b"".join(rows[s] for s in seqs)[: size_bits // 8]

    # -- master side

    def reserve(self, number: int, size_bits: int, master_sae: str, slave_sae: str, announce=None) -> list:
        """Take keys for ``enc_keys``; ``announce(entries)`` syncs the peer.

        Nothing changes if there is not enough material or the
        announcement fails.
        """
        if number == 0:
            return []
        per_key = -(-size_bits // self.stream.unit_bits)
        now = time.time()
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                seqs = [r[0] for r in self._db.execute(
                    "SELECT seq FROM units WHERE state='available' ORDER BY seq LIMIT ?", (number * per_key,)
                ).fetchall()]
                if len(seqs) < number * per_key:
                    raise Depleted(
                        f"insufficient key material: {len(seqs) // per_key} key(s) of {size_bits} bits available"
                    )
                entries, records = [], []
                for i in range(number):
                    part = seqs[i * per_key:(i + 1) * per_key]
                    uids = [self.stream.unit(s)[0] for s in part]
                    key_id = compose_key_id(uids, size_bits, self.stream.unit_bits)
                    self._db.execute(
                        f"UPDATE units SET state='reserved' WHERE seq IN ({','.join('?' * len(part))})", part
                    )
                    self._db.execute(
                        "INSERT INTO keys VALUES (?, ?, ?, ?, ?, ?, 1, 0)",
                        (key_id, ",".join(map(str, part)), size_bits, master_sae, slave_sae, now),
                    )
                    entries.append({"key_ID": key_id, "unit_seqs": part, "size": size_bits})
                    records.append(KeyRecord(key_id, self._assemble(part, size_bits), now, master_sae))
                if announce is not None:
                    announce(entries)
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
        return records

    # -- slave side

    def accept(self, entries: Sequence[dict], master_sae: str, slave_sae: str) -> None:
        """Record keys the master has handed out so ``deliver`` can serve them."""
        now = time.time()
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                for e in entries:
                    part = [int(s) for s in e["unit_seqs"]]
                    size = int(e["size"])
                    uids = [self.stream.unit(s)[0] for s in part]
                    if compose_key_id(uids, size, self.stream.unit_bits) != e["key_ID"]:
                        raise BadRequest(f"key {e['key_ID']} does not match local key material")
                    if self._db.execute("SELECT 1 FROM keys WHERE key_id=?", (e["key_ID"],)).fetchone():
                        raise Consumed(f"key {e['key_ID']} already announced")
                    self._materialize(part, now)
                    self._db.execute(
                        f"UPDATE units SET state='reserved' WHERE seq IN ({','.join('?' * len(part))})", part
                    )
                    self._db.execute(
                        "INSERT INTO keys VALUES (?, ?, ?, ?, ?, ?, 1, 0)",
                        (e["key_ID"], ",".join(map(str, part)), size, master_sae, slave_sae, now),
                    )
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise

    def deliver(self, key_ids: Sequence[str], slave_sae: str, master_sae: str) -> list:
        """Hand out keys for ``dec_keys`` exactly once; all-or-nothing."""
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                out = []
                for kid in key_ids:
                    row = self._db.execute(
                        "SELECT unit_seqs, size_bits, master_sae, slave_sae, dec_delivered, created_at "
                        "FROM keys WHERE key_id=?", (kid,)
                    ).fetchone()
                    if row is None or row[2] != master_sae or row[3] != slave_sae:
                        raise NotFound(f"unknown key_ID {kid}")
                    if row[4]:
                        raise Consumed(f"key_ID {kid} was already delivered")
                    self._db.execute("UPDATE keys SET dec_delivered=1 WHERE key_id=?", (kid,))
                    seqs = [int(s) for s in row[0].split(",")]
                    out.append(KeyRecord(kid, self._assemble(seqs, row[1]), row[5], slave_sae))
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
        return out

    def counts(self) -> dict:
        q = self._db.execute
        return {
            "stored": self.stored_count(),
            "enc_delivered": q("SELECT count(*) FROM keys WHERE enc_delivered=1").fetchone()[0],
            "dec_delivered": q("SELECT count(*) FROM keys WHERE dec_delivered=1").fetchone()[0],
            "units_total": self.next_index(),
        }
