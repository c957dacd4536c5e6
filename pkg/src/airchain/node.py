"""A live validator node: journal, consensus engine, TCP peering/gossip
and the REST API composed into one process.

Concurrency model: network and API threads only enqueue; a single event
loop thread owns the journal, the engine and the peer table.  Stopping
the node flushes the block store, so a restart resumes from the same
head (the crash-recovery contract).
"""

from __future__ import annotations

import json
import logging
import os
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from airchain import api, consensus, ledger
from airchain.api import ApiServer
from airchain.consensus import ConsensusParams, WinTracker
from airchain.consensus.base import active_algorithm, create_engine
from airchain.crypto import KeyPair, read_key_file
from airchain.journal import BlockStore, Journal
from airchain.ledger import Batch, Block
from airchain.network import NetworkError, PeerTable, TcpChannel, tcp_send
from airchain.registry import Registry
from airchain.settings import CONSENSUS_KEY, encode_setting
from airchain.trie import EMPTY_ROOT, NodeStore, StateTrie

logger = logging.getLogger(__name__)

PEERING_TICK_MS = 2000


class NodeStartupError(Exception):
    pass


@dataclass
class NodeConfig:
    key_file: str
    data_dir: str
    genesis_file: Optional[str] = None
    host: str = "127.0.0.1"
    api_port: int = api.DEFAULT_API_PORT
    internal_port: int = api.DEFAULT_INTERNAL_PORT
    consensus_port: int = api.DEFAULT_CONSENSUS_PORT
    peer_seeds: tuple[str, ...] = ()  # internal-channel endpoints
    min_connectivity: int = 1
    max_connectivity: int = 8
    n: int = 1
    m: int = 0
    algorithm: str = "poet_cft"
    target_block_interval_ms: int = 1000
    membership: tuple[str, ...] = ()  # validator public keys; self added

    def __post_init__(self):
        # port 0 asks the OS for an ephemeral port, so repeats are fine
        ports = [p for p in (self.api_port, self.internal_port, self.consensus_port) if p]
        if len(set(ports)) != len(ports):
            raise NodeStartupError(f"ports must be distinct, got {ports}")

    @classmethod
    def from_file(cls, path: str) -> "NodeConfig":
        with open(path, "r", encoding="utf-8") as fh:
            rec = json.load(fh)
        rec.setdefault("data_dir", os.path.join(os.path.dirname(path) or ".", "data"))
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in rec.items() if k in known}
        for tuple_field in ("peer_seeds", "membership"):
            if tuple_field in kwargs:
                kwargs[tuple_field] = tuple(kwargs[tuple_field])
        return cls(**kwargs)


def build_genesis(
    signer: KeyPair,
    algorithm: str = "poet_cft",
    extra_settings: Optional[dict] = None,
    executor=None,
) -> Block:
    """Deterministic genesis block: settings batch applied to the empty trie."""
    from airchain.journal import Executor
    from airchain.trie import StateTrie as _Trie

    executor = executor or Executor(_Trie(NodeStore()))
    rng = random.Random(0xA1C)
    settings = {CONSENSUS_KEY: algorithm, **(extra_settings or {})}
    txns = [
        ledger.build_transaction(
            encode_setting(key, value), family="settings", signer=signer, rng=rng
        )
        for key, value in sorted(settings.items())
    ]
    batch = ledger.build_batch(txns, signer)
    root, violations = executor.execute_batch(EMPTY_ROOT, batch, 0)
    if violations:
        raise NodeStartupError(f"genesis settings invalid: {violations}")
    from airchain.codec import canonical_encode

    return ledger.build_block(
        block_num=0,
        previous_block_id=ledger.GENESIS_PREVIOUS,
        batches=[batch],
        state_root_hash=root,
        signer=signer,
        consensus_payload=canonical_encode({"alg": "genesis"}),
    )


class LiveNode:
    """Implements EngineServices for the engine and NodeView for the API."""

    def __init__(self, config: NodeConfig):
        self.config = config
        os.makedirs(config.data_dir, exist_ok=True)
        self.signer = read_key_file(config.key_file)
        self.node_id = self.signer.public_key
        self.trie = StateTrie(NodeStore(os.path.join(config.data_dir, "state.dat")))
        try:
            self.store = BlockStore(os.path.join(config.data_dir, "blocks"))
        except Exception as exc:
            raise NodeStartupError(f"corrupt block store: {exc}") from exc
        self.registry = Registry(
            os.path.join(config.data_dir, "registry.log"), clock=lambda: int(time.time())
        )
        self.journal = Journal(
            self.store, self.trie, self.signer, clock=lambda: int(time.time())
        )
        self.journal.consensus_verifier = self._verify_consensus
        self.journal.on_commit.append(self._on_block_committed)
        self.peer_table = PeerTable(
            self_id=self.node_id,
            min_connectivity=config.min_connectivity,
            max_connectivity=config.max_connectivity,
        )
        self.peer_endpoints: dict[str, dict] = {}  # node_id -> {internal, consensus}
        self.membership = sorted(set(config.membership) | {self.node_id})
        self.win_tracker = WinTracker()
        self.engine = None
        self.engine_name: Optional[str] = None
        self._events: queue.Queue = queue.Queue()
        self._timers: dict[str, tuple[int, float]] = {}  # name -> (gen, deadline)
        self._timer_gen: dict[str, int] = {}
        self._pending_head_events: list[Block] = []
        self._stop = threading.Event()
        self._loop_thread: Optional[threading.Thread] = None
        self._epoch = time.monotonic()
        self._seen_gossip: set[str] = set()

        self.api_server = ApiServer(self, host=config.host, port=config.api_port)
        try:
            self.internal_channel = TcpChannel(
                config.host, config.internal_port, self._on_internal_envelope
            )
            self.consensus_channel = TcpChannel(
                config.host, config.consensus_port, self._on_consensus_envelope
            )
        except OSError as exc:
            self.api_server.stop()
            raise NodeStartupError(f"cannot bind node ports: {exc}") from exc

    # --- time ---

    def now_ms(self) -> int:
        return int((time.monotonic() - self._epoch) * 1000)

    # --- lifecycle ---

    def start(self) -> None:
        self._bootstrap_chain()
        self.api_server.start()
        self.internal_channel.start()
        self.consensus_channel.start()
        self._loop_thread = threading.Thread(target=self._loop, daemon=True)
        self._loop_thread.start()
        logger.info(
            "node %s up: api=%d internal=%d consensus=%d",
            self.node_id[:12],
            self.api_server.port,
            self.internal_channel.port,
            self.consensus_channel.port,
        )

    def stop(self) -> None:
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=5.0)
        self.api_server.stop()
        self.internal_channel.stop()
        self.consensus_channel.stop()
        self.store.close()
        self.trie.store.flush()
        self.trie.store.close()
        self.registry.close()

    def _bootstrap_chain(self) -> None:
        if self.store.head is None:
            if self.config.genesis_file and os.path.exists(self.config.genesis_file):
                with open(self.config.genesis_file, "rb") as fh:
                    genesis = Block.decode(fh.read().strip())
            else:
                genesis = build_genesis(self.signer, self.config.algorithm)
            status, reasons = self.journal.commit_genesis(genesis)
            if status == "rejected":
                raise NodeStartupError(f"genesis rejected: {reasons}")
        self._pending_head_events.clear()
        head = self.store.head
        algorithm = active_algorithm(self.trie, head.header.state_root_hash)
        self._activate_engine(algorithm)

    def _activate_engine(self, name: str) -> None:
        if self.engine is not None:
            self.engine.stop()
        params = ConsensusParams(
            n=max(self.config.n, len(self.membership)),
            m=self.config.m,
            algorithm=name,
            target_block_interval_ms=self.config.target_block_interval_ms,
        )
        rng = random.Random(int(self.node_id[:12], 16) ^ os.getpid())
        self.engine = create_engine(name, params, self.node_id, self.membership, self, rng)
        self.engine_name = name
        self.engine.start(self.now_ms())

    # --- event loop ---

    def _loop(self) -> None:
        self.set_timer("peering_tick", 50)
        while not self._stop.is_set():
            self._fire_due_timers()
            try:
                kind, payload = self._events.get(timeout=0.02)
            except queue.Empty:
                continue
            try:
                if kind == "consensus":
                    sender, message = payload
                    if self.engine is not None:
                        self.engine.on_message(sender, message, self.now_ms())
                elif kind == "gossip":
                    self._handle_gossip(*payload)
                elif kind == "peering":
                    self._handle_peering(*payload)
                elif kind == "submit":
                    self._handle_submit(payload)
            except Exception:
                logger.exception("event %s failed", kind)
            self._drain_head_events()

    def _fire_due_timers(self) -> None:
        now = self.now_ms()
        due = [
            (name, gen)
            for name, (gen, deadline) in list(self._timers.items())
            if deadline <= now
        ]
        for name, gen in due:
            if self._timers.get(name, (None, None))[0] != gen:
                continue
            del self._timers[name]
            try:
                if name == "peering_tick":
                    self._peering_tick()
                    self.set_timer("peering_tick", PEERING_TICK_MS)
                elif self.engine is not None:
                    self.engine.on_timer(name, now)
            except Exception:
                logger.exception("timer %s failed", name)
            self._drain_head_events()

    # --- EngineServices ---

    def set_timer(self, name: str, delay_ms: int) -> None:
        gen = self._timer_gen.get(name, 0) + 1
        self._timer_gen[name] = gen
        self._timers[name] = (gen, self.now_ms() + delay_ms)

    def cancel_timer(self, name: str) -> None:
        self._timer_gen[name] = self._timer_gen.get(name, 0) + 1
        self._timers.pop(name, None)

    def send(self, to: str, message: dict) -> None:
        endpoint = self.peer_endpoints.get(to, {}).get("consensus")
        if endpoint is None:
            return
        try:
            tcp_send(endpoint, "consensus", self.signer, message)
        except NetworkError as exc:
            logger.debug("consensus send to %s failed: %s", to[:12], exc)

    def broadcast(self, message: dict) -> None:
        for member in self.membership:
            if member != self.node_id:
                self.send(member, message)

    def try_publish(self) -> Optional[Block]:
        block = self.journal.publish_block(self.engine, self.now_ms())
        if block is not None and self.engine is not None:
            self.engine.on_block_built(block, self.now_ms())
        return block

    def commit_block(self, block: Block) -> str:
        status, _ = self.journal.completer_submit(block)
        head = self.store.head
        if head is not None and head.id == block.id:
            return "extended"
        return status

    def validate_candidate(self, block: Block) -> bool:
        if ledger.validate_block_structure(block):
            return False
        prev = self.store.get(block.header.previous_block_id)
        if prev is None or block.header.block_num != prev.block_num + 1:
            return False
        ok, _ = self._verify_consensus(block, prev)
        if not ok:
            return False
        root, results = self.journal.executor.execute_batches(
            prev.header.state_root_hash, block.batches, self.journal.clock()
        )
        return not any(results) and root == block.header.state_root_hash

    def gossip_block(self, block: Block) -> None:
        self._gossip("block", block.id, block.to_record(), exclude=None)

    def head(self) -> Optional[Block]:
        return self.store.head

    def get_block_by_num(self, block_num: int) -> Optional[Block]:
        return self.store.block_by_num(block_num)

    def pending_batch_count(self) -> int:
        return len(self.journal.pending.batches)

    # --- consensus glue (same contract as the simulator node) ---

    def _verify_consensus(self, block: Block, prev: Optional[Block]):
        if prev is None:
            return True, ""
        algorithm = active_algorithm(self.trie, prev.header.state_root_hash)
        return consensus.verify_payload_static(algorithm, block.header, prev.header)

    def _on_block_committed(self, block: Block) -> None:
        try:
            payload = consensus.decode_payload(block.header)
        except consensus.ConsensusError:
            payload = {}
        if payload.get("alg") == "poet_cft":
            self.win_tracker.record(block.header.signer_public_key)
        self._pending_head_events.append(block)

    def _drain_head_events(self) -> None:
        if not self._pending_head_events:
            return
        self._pending_head_events.clear()
        head = self.store.head
        if head is None:
            return
        wanted = active_algorithm(self.trie, head.header.state_root_hash)
        if wanted != self.engine_name:
            logger.info("switching consensus engine to %s", wanted)
            self._activate_engine(wanted)
        elif self.engine is not None:
            self.engine.on_head_updated(head, self.now_ms())

    # --- gossip over TCP ---

    def _gossip(self, kind: str, content_id: str, record: dict, exclude) -> None:
        self._seen_gossip.add(content_id)
        payload = {"kind": kind, "content_id": content_id, "record": record}
        for peer_id in sorted(self.peer_table.peers):
            if peer_id == exclude:
                continue
            endpoint = self.peer_endpoints.get(peer_id, {}).get("internal")
            if endpoint is None:
                continue
            try:
                tcp_send(endpoint, "gossip", self.signer, payload)
            except NetworkError as exc:
                logger.debug("gossip to %s failed: %s", peer_id[:12], exc)

    def _on_internal_envelope(self, kind: str, sender: str, payload: dict) -> None:
        if kind == "gossip":
            self._events.put(("gossip", (sender, payload)))
        elif kind in ("connect", "connect_ok", "connect_refused", "get_peers", "peers"):
            self._events.put(("peering", (kind, sender, payload)))

    def _on_consensus_envelope(self, kind: str, sender: str, payload: dict) -> None:
        if kind == "consensus":
            self._events.put(("consensus", (sender, payload)))

    def _handle_gossip(self, sender: str, payload: dict) -> None:
        content_id = payload.get("content_id", "")
        if content_id in self._seen_gossip:
            return
        self._seen_gossip.add(content_id)
        kind = payload.get("kind")
        record = payload.get("record", {})
        self._gossip(kind, content_id, record, exclude=sender)
        if kind == "block":
            self.journal.completer_submit(Block.from_record(record))
        elif kind == "batch":
            status, _ = self.journal.completer_submit(Batch.from_record(record))
            if status == "routed" and self.engine is not None:
                self.engine.on_batches_available(self.now_ms())

    # --- peering over TCP ---

    def _my_endpoints(self) -> dict:
        return {
            "internal": f"{self.config.host}:{self.internal_channel.port}",
            "consensus": f"{self.config.host}:{self.consensus_channel.port}",
        }

    def _peering_tick(self) -> None:
        for seed in self.config.peer_seeds:
            if seed and seed not in [
                e.get("internal") for e in self.peer_endpoints.values()
            ]:
                try:
                    tcp_send(
                        seed,
                        "connect",
                        self.signer,
                        {"endpoints": self._my_endpoints()},
                    )
                except NetworkError:
                    pass
        if not self.peer_table.below_min:
            return
        for candidate in self.peer_table.candidates():
            endpoint = self.peer_endpoints.get(candidate, {}).get("internal")
            self.peer_table.attempted.add(candidate)
            if endpoint is None:
                continue
            try:
                tcp_send(
                    endpoint, "connect", self.signer, {"endpoints": self._my_endpoints()}
                )
            except NetworkError:
                pass
            break

    def _handle_peering(self, kind: str, sender: str, payload: dict) -> None:
        endpoints = payload.get("endpoints", {})
        if endpoints:
            self.peer_endpoints.setdefault(sender, {}).update(endpoints)
            self.peer_table.learn(sender, endpoints.get("internal", ""))
        if kind == "connect":
            if self.peer_table.accepts_connect(sender):
                self.peer_table.add_peer(sender, endpoints.get("internal", ""))
                reply = {
                    "endpoints": self._my_endpoints(),
                    "peers": [
                        {"node": pid, "endpoints": self.peer_endpoints.get(pid, {})}
                        for pid in self.peer_table.peers
                        if pid != sender
                    ],
                }
                self._reply(sender, "connect_ok", reply)
            else:
                self._reply(sender, "connect_refused", {"endpoints": self._my_endpoints()})
        elif kind == "connect_ok":
            self.peer_table.add_peer(sender, endpoints.get("internal", ""))
            for peer in payload.get("peers", []):
                node = peer.get("node")
                if node and node != self.node_id:
                    self.peer_table.learn(node)
                    if peer.get("endpoints"):
                        self.peer_endpoints.setdefault(node, {}).update(peer["endpoints"])
        elif kind == "connect_refused":
            self.peer_table.attempted.add(sender)

    def _reply(self, node_id: str, kind: str, payload: dict) -> None:
        endpoint = self.peer_endpoints.get(node_id, {}).get("internal")
        if endpoint is None:
            return
        try:
            tcp_send(endpoint, kind, self.signer, payload)
        except NetworkError:
            pass

    # --- NodeView (REST) ---

    def submit_batch(self, batch: Batch) -> tuple[str, list[str]]:
        # structural validation runs on the API thread; the journal work
        # happens on the event loop
        violations = ledger.validate_batch(batch)
        if violations:
            return "rejected", violations
        if batch.id in self.journal.committed_batch_ids:
            return "duplicate", []
        self._events.put(("submit", batch))
        return "routed", []

    def _handle_submit(self, batch: Batch) -> None:
        status, _ = self.journal.completer_submit(batch)
        if status == "routed":
            self._gossip("batch", batch.id, batch.to_record(), exclude=None)
            if self.engine is not None:
                self.engine.on_batches_available(self.now_ms())

    def get_block(self, block_id: str) -> Optional[Block]:
        return self.store.get(block_id)

    def chain_page(self, limit: int, start: Optional[str]) -> list[Block]:
        return list(self.store.chain(limit=limit, start=start))

    def peers_record(self) -> dict:
        return {
            "self_id": self.node_id,
            "peers": sorted(self.peer_table.peers),
            "min_connectivity": self.peer_table.min_connectivity,
            "max_connectivity": self.peer_table.max_connectivity,
        }

    def status_record(self) -> dict:
        head = self.store.head
        zscores = {}
        for node_key, rate in self.win_tracker.zscores(len(self.membership)).items():
            zscores[node_key] = {
                "z_milli": int(round(rate.z * 1000)),
                "flagged": 1 if rate.flagged else 0,
            }
        return {
            "node": self.node_id,
            "engine": self.engine_name or "",
            "head_id": head.id if head else "",
            "head_num": head.block_num if head else -1,
            "committed_batches": len(self.journal.committed_batch_ids),
            "pending_batches": len(self.journal.pending.batches),
            "rounds_observed": self.win_tracker.rounds_observed,
            "zscores": zscores,
        }
