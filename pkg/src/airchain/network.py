"""Peering and gossip.

Nodes bootstrap by sending sequential CONNECT/GET_PEERS requests to
candidate peers until they reach minimum connectivity; a node already at
maximum connectivity refuses, and the requester keeps attempting other
candidates.  The network counts as peered when every node is at minimum
connectivity or every under-connected node has exhausted its candidates.

Gossip floods blocks and batches: each node forwards a message exactly
once (dedup by content id).  The same peer-table rules back both the
deterministic in-process simulator and the TCP transport.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from airchain.codec import CodecError, canonical_decode, canonical_encode
from airchain.crypto import sign, verify

logger = logging.getLogger(__name__)

DEFAULT_MIN_CONNECTIVITY = 3
DEFAULT_MAX_CONNECTIVITY = 8

MAX_FRAME_BYTES = 4 * 1024 * 1024


class NetworkError(Exception):
    pass


@dataclass
class PeerTable:
    """Connectivity state of one node."""

    self_id: str
    min_connectivity: int = DEFAULT_MIN_CONNECTIVITY
    max_connectivity: int = DEFAULT_MAX_CONNECTIVITY
    peers: dict[str, str] = field(default_factory=dict)  # node_id -> endpoint
    known: dict[str, str] = field(default_factory=dict)
    attempted: set[str] = field(default_factory=set)

    def learn(self, node_id: str, endpoint: str = "") -> None:
        if node_id != self.self_id and node_id not in self.known:
            self.known[node_id] = endpoint

    def candidates(self) -> list[str]:
        """Unattempted, unpeered known nodes in lexicographic order."""
        return sorted(
            n for n in self.known
            if n not in self.peers and n not in self.attempted and n != self.self_id
        )

    @property
    def at_max(self) -> bool:
        return len(self.peers) >= self.max_connectivity

    @property
    def below_min(self) -> bool:
        return len(self.peers) < self.min_connectivity

    def accepts_connect(self, node_id: str) -> bool:
        """CONNECT admission rule: refuse only when already at maximum."""
        if node_id == self.self_id:
            return False
        if node_id in self.peers:
            return True
        return not self.at_max

    def add_peer(self, node_id: str, endpoint: str = "") -> None:
        if node_id != self.self_id:
            self.peers[node_id] = endpoint
            self.known.setdefault(node_id, endpoint)

    def drop_peer(self, node_id: str) -> None:
        self.peers.pop(node_id, None)


def peer_connect_round(table: PeerTable, directory: dict[str, PeerTable]) -> PeerTable:
    """One peering step for one node against reachable nodes.

    Sends CONNECT to the first unattempted candidate; on acceptance both
    sides add each other and the GET_PEERS reply seeds new candidates.
    Unreachable or refusing candidates are simply marked attempted.
    """
    if not directory:
        raise NetworkError("directory must be nonempty")
    if not table.below_min:
        return table
    for candidate in table.candidates():
        table.attempted.add(candidate)
        target = directory.get(candidate)
        if target is None:
            continue  # unreachable
        if target.accepts_connect(table.self_id) and not table.at_max:
            target.add_peer(table.self_id)
            table.add_peer(candidate)
            # GET_PEERS reply
            for peer_id, endpoint in target.peers.items():
                table.learn(peer_id, endpoint)
        return table
    return table


def run_peering(tables: dict[str, PeerTable], max_rounds: int = 100) -> int:
    """Drive synchronized peering rounds until settled; returns rounds used."""
    for round_num in range(1, max_rounds + 1):
        if is_fully_peered(tables.values()):
            return round_num - 1
        for node_id in sorted(tables):
            peer_connect_round(tables[node_id], tables)
    return max_rounds


def is_fully_peered(tables) -> bool:
    """Peered: everyone at minimum, or the under-connected are exhausted."""
    tables = list(tables)
    all_ids = {t.self_id for t in tables}
    for table in tables:
        if not table.below_min:
            continue
        others = all_ids - {table.self_id}
        unattempted = others - table.attempted - set(table.peers)
        if unattempted:
            return False
    return True


# --- wire envelopes (TCP transport) ---


def encode_envelope(kind: str, sender_pair, payload: dict) -> bytes:
    body = {"type": kind, "sender": sender_pair.public_key, "payload": payload}
    signature = sign(canonical_encode(body), sender_pair)
    return canonical_encode({**body, "signature": signature})


def decode_envelope(data: bytes) -> tuple[str, str, dict]:
    """Returns (type, sender, payload); raises NetworkError on bad envelopes."""
    try:
        rec = canonical_decode(data)
        kind = rec["type"]
        sender = rec["sender"]
        payload = rec["payload"]
        signature = rec["signature"]
    except (CodecError, KeyError) as exc:
        raise NetworkError(f"malformed envelope: {exc}") from exc
    body = canonical_encode({"type": kind, "sender": sender, "payload": payload})
    if not verify(body, signature, sender):
        raise NetworkError("envelope signature invalid")
    return kind, sender, payload


def write_frame(sock: socket.socket, data: bytes) -> None:
    if len(data) > MAX_FRAME_BYTES:
        raise NetworkError(f"frame of {len(data)} bytes exceeds 4 MiB limit")
    sock.sendall(struct.pack(">I", len(data)) + data)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise NetworkError(f"frame of {length} bytes exceeds 4 MiB limit")
    return _read_exact(sock, length)


def _read_exact(sock: socket.socket, count: int) -> Optional[bytes]:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class TcpChannel:
    """One listener; each inbound frame is decoded and handed to the handler."""

    def __init__(self, host: str, port: int, handler: Callable[[str, str, dict], None]):
        self._handler = handler
        self._server = socket.create_server((host, port), reuse_port=False)
        self._server.settimeout(0.2)
        self.port = self._server.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(5.0)
            try:
                while True:
                    frame = read_frame(conn)
                    if frame is None:
                        return
                    kind, sender, payload = decode_envelope(frame)
                    self._handler(kind, sender, payload)
            except (NetworkError, OSError) as exc:
                logger.debug("dropping connection: %s", exc)

    def stop(self) -> None:
        self._stop.set()
        self._server.close()
        if self._thread.is_alive():
            self._thread.join(timeout=2.0)


def tcp_send(endpoint: str, kind: str, sender_pair, payload: dict, timeout=5.0) -> None:
    """Fire one envelope at host:port; raises NetworkError on failure."""
    host, _, port = endpoint.rpartition(":")
    try:
        with socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout) as sock:
            write_frame(sock, encode_envelope(kind, sender_pair, payload))
    except (OSError, ValueError) as exc:
        raise NetworkError(f"send to {endpoint} failed: {exc}") from exc
