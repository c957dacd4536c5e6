"""Deterministic in-process multi-node simulation harness.

Simulated time advances through a discrete-event scheduler, never the
wall clock; every random draw comes from generators seeded off the
scenario seed, so a (scenario, seed) pair always produces a
byte-identical report.  Nodes run the real journal, consensus engines,
gossip and API handlers; only the transport and clocks are simulated.

Fault scripts cover crash/recovery windows, pBFT equivocation and
collusion, PoET zero-wait cheating, and scheduled consensus switches.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from airchain import api, consensus, ledger
from airchain.codec import canonical_encode
from airchain.consensus import ConsensusParams, WinTracker
from airchain.consensus.base import active_algorithm, create_engine
from airchain.consensus.pbft import ByzantinePbftEngine, PbftEngine
from airchain.crypto import KeyPair, keypair_generate
from airchain.ingest import DevicePipeline, SensorNoiseModel, BatchTriggerConfig
from airchain.journal import BlockStore, Journal
from airchain.ledger import Batch, Block
from airchain.network import PeerTable, is_fully_peered, run_peering
from airchain.registry import Registry
from airchain.settings import CONSENSUS_KEY, encode_setting
from airchain.trie import NodeStore, StateTrie
from airchain.txfamily import SourceFlag

logger = logging.getLogger(__name__)

DEFAULT_DRAIN_MS = 30_000


def derive_seed(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_keypair(master_seed: int, label: str) -> KeyPair:
    digest = hashlib.sha256(f"key:{master_seed}:{label}".encode("utf-8")).digest()
    return keypair_generate(seed=digest)


class Scheduler:
    """Event heap ordered by (time, insertion sequence)."""

    def __init__(self):
        self.now_ms = 0
        self._seq = 0
        self._heap: list = []

    def at(self, delay_ms: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (self.now_ms + max(0, delay_ms), self._seq, fn))
        self._seq += 1

    def run_until(self, t_end_ms: int) -> None:
        while self._heap and self._heap[0][0] <= t_end_ms:
            at, _, fn = heapq.heappop(self._heap)
            self.now_ms = at
            fn()
        self.now_ms = max(self.now_ms, t_end_ms)

    def run_until_idle(self, t_cap_ms: int) -> None:
        while self._heap and self._heap[0][0] <= t_cap_ms:
            at, _, fn = heapq.heappop(self._heap)
            self.now_ms = at
            fn()


@dataclass
class SimTransportConfig:
    latency_ms: tuple[int, int] = (5, 25)
    drop_rate: float = 0.0
    partitions: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.drop_rate <= 1:
            raise ValueError("drop rate must lie in [0, 1]")
        seen = set()
        for part in self.partitions:
            if seen & set(part):
                raise ValueError("partitions must be disjoint")
            seen |= set(part)


class SimTransport:
    """Delivers messages into per-node handlers with seeded latency/drops."""

    def __init__(self, scheduler: Scheduler, config: SimTransportConfig):
        self.scheduler = scheduler
        self.config = config
        self.rng = random.Random(config.seed)
        self.handlers: dict[str, Callable[[str, dict], None]] = {}
        self.crashed: set[str] = set()
        self.partitions = [set(p) for p in config.partitions]
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def register(self, node_id: str, handler: Callable[[str, dict], None]) -> None:
        self.handlers[node_id] = handler

    def _partition_of(self, node_id: str) -> Optional[int]:
        for index, part in enumerate(self.partitions):
            if node_id in part:
                return index
        return None

    def _cut(self, sender: str, to: str) -> bool:
        if self.partitions:
            if self._partition_of(sender) != self._partition_of(to):
                return True
        return False

    def send(self, sender: str, to: str, message: dict) -> None:
        self.sent += 1
        if sender in self.crashed or to not in self.handlers:
            self.dropped += 1
            return
        if self._cut(sender, to):
            self.dropped += 1
            return
        if self.config.drop_rate and self.rng.random() < self.config.drop_rate:
            self.dropped += 1
            return
        low, high = self.config.latency_ms
        delay = self.rng.randint(low, high) if high > low else low

        def deliver():
            if to in self.crashed or to not in self.handlers:
                self.dropped += 1
                return
            self.delivered += 1
            self.handlers[to](sender, message)

        self.scheduler.at(delay, deliver)


class SimValidatorNode:
    """A full validator wired to the simulated transport and clock.

    Implements both the consensus EngineServices surface and the API
    NodeView surface, so engines and REST handlers run unmodified.
    """

    def __init__(
        self,
        name: str,
        signer: KeyPair,
        scheduler: Scheduler,
        transport: SimTransport,
        params: ConsensusParams,
        membership: list[str],
        registry: Registry,
        rng: random.Random,
    ):
        self.name = name
        self.signer = signer
        self.node_id = signer.public_key
        self.scheduler = scheduler
        self.transport = transport
        self.params = params
        self.membership = membership
        self.registry = registry
        self.rng = rng
        self.trie = StateTrie(NodeStore())
        self.store = BlockStore()
        self.journal = Journal(
            self.store, self.trie, signer, clock=lambda: scheduler.now_ms // 1000
        )
        self.journal.consensus_verifier = self._verify_consensus
        self.journal.on_commit.append(self._on_block_committed)
        self.peer_table = PeerTable(self_id=self.node_id)
        self.engine = None
        self.engine_name = None
        self.crashed = False
        self.seen_gossip: set[str] = set()
        self.win_tracker = WinTracker()
        self.commit_history: list[tuple[int, int, str]] = []  # (time, num, id)
        self.finality_violations: list[str] = []
        self.view_changes_total = 0
        self.leadership_terms: list[tuple[int, str]] = []
        self._timer_gen: dict[str, int] = {}
        self._pending_head_events: list[Block] = []
        self._fault_engine_factory = None  # byzantine/cheat overrides
        transport.register(self.node_id, self._on_network_message)

    # --- consensus glue ---

    def _verify_consensus(self, block: Block, prev: Optional[Block]):
        if prev is None:
            return True, ""  # genesis
        algorithm = active_algorithm(self.trie, prev.header.state_root_hash)
        return consensus.verify_payload_static(
            algorithm, block.header, prev.header if prev else None
        )

    def _on_block_committed(self, block: Block) -> None:
        for _, num, block_id, _ in self.commit_history:
            if num == block.block_num and block_id != block.id:
                if self.engine_name in ("pbft", "raft"):
                    self.finality_violations.append(
                        f"height {num} rewritten from {block_id[:12]} to {block.id[:12]}"
                    )
        self.commit_history.append(
            (self.scheduler.now_ms, block.block_num, block.id, self.engine_name or "")
        )
        payload = {}
        try:
            payload = consensus.decode_payload(block.header)
        except consensus.ConsensusError:
            pass
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
            self._activate_engine(wanted)
        elif self.engine is not None:
            self.engine.on_head_updated(head, self.scheduler.now_ms)

    def _activate_engine(self, name: str) -> None:
        if self.engine is not None:
            if isinstance(self.engine, PbftEngine):
                self.view_changes_total += self.engine.view_change_count
            self.engine.stop()
        factory = self._fault_engine_factory
        if factory is not None:
            engine = factory(name)
        else:
            engine = None
        if engine is None:
            engine = create_engine(
                name, self.params, self.node_id, self.membership, self, self.rng
            )
        self.engine = engine
        self.engine_name = name
        logger.info("%s: engine %s active", self.name, name)
        self.engine.start(self.scheduler.now_ms)

    # --- EngineServices ---

    def send(self, to: str, message: dict) -> None:
        self.transport.send(self.node_id, to, {"channel": "consensus", "body": message})

    def broadcast(self, message: dict) -> None:
        for member in self.membership:
            if member != self.node_id:
                self.send(member, message)

    def set_timer(self, name: str, delay_ms: int) -> None:
        gen = self._timer_gen.get(name, 0) + 1
        self._timer_gen[name] = gen

        def fire():
            if self.crashed or self._timer_gen.get(name) != gen:
                return
            if self.engine is not None:
                self.engine.on_timer(name, self.scheduler.now_ms)
                self._drain_head_events()

        self.scheduler.at(delay_ms, fire)

    def cancel_timer(self, name: str) -> None:
        self._timer_gen[name] = self._timer_gen.get(name, 0) + 1

    def try_publish(self) -> Optional[Block]:
        block = self.journal.publish_block(self.engine, self.scheduler.now_ms)
        if block is not None and self.engine is not None:
            self.engine.on_block_built(block, self.scheduler.now_ms)
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
        if prev is None:
            return False
        if block.header.block_num != prev.block_num + 1:
            return False
        ok, _ = self._verify_consensus(block, prev)
        if not ok:
            return False
        root, results = self.journal.executor.execute_batches(
            prev.header.state_root_hash, block.batches, self.journal.clock()
        )
        if any(results):
            return False
        return root == block.header.state_root_hash

    def gossip_block(self, block: Block) -> None:
        self._gossip_originate("block", block.id, block.to_record())

    def head(self) -> Optional[Block]:
        return self.store.head

    def get_block_by_num(self, block_num: int) -> Optional[Block]:
        return self.store.block_by_num(block_num)

    def pending_batch_count(self) -> int:
        return len(self.journal.pending.batches)

    # --- gossip ---

    def _gossip_originate(self, kind: str, content_id: str, record: dict) -> None:
        self.seen_gossip.add(content_id)
        self._gossip_forward(kind, content_id, record, exclude=None)

    def _gossip_forward(self, kind: str, content_id: str, record: dict, exclude) -> None:
        for peer in sorted(self.peer_table.peers):
            if peer == exclude:
                continue
            self.transport.send(
                self.node_id,
                peer,
                {
                    "channel": "gossip",
                    "kind": kind,
                    "content_id": content_id,
                    "record": record,
                },
            )

    def _on_network_message(self, sender: str, message: dict) -> None:
        if self.crashed:
            return
        channel = message.get("channel")
        if channel == "consensus":
            if self.engine is not None:
                self.engine.on_message(sender, message["body"], self.scheduler.now_ms)
                self._drain_head_events()
        elif channel == "gossip":
            self._on_gossip(sender, message)

    def _on_gossip(self, sender: str, message: dict) -> None:
        content_id = message["content_id"]
        if content_id in self.seen_gossip:
            return  # forward exactly once
        self.seen_gossip.add(content_id)
        kind = message["kind"]
        record = message["record"]
        self._gossip_forward(kind, content_id, record, exclude=sender)
        if kind == "block":
            block = Block.from_record(record)
            self.journal.completer_submit(block)
            self._drain_head_events()
        elif kind == "batch":
            batch = Batch.from_record(record)
            status, _ = self.journal.completer_submit(batch)
            if status == "routed" and self.engine is not None:
                self.engine.on_batches_available(self.scheduler.now_ms)
                self._drain_head_events()

    # --- NodeView (REST handlers run against this) ---

    def submit_batch(self, batch: Batch) -> tuple[str, list[str]]:
        status, violations = self.journal.completer_submit(batch)
        if status == "routed":
            self._gossip_originate("batch", batch.id, batch.to_record())
            if self.engine is not None:
                self.engine.on_batches_available(self.scheduler.now_ms)
                self._drain_head_events()
        return status, violations

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
        for node, rate in self.win_tracker.zscores(len(self.membership)).items():
            zscores[node] = {"z_milli": int(round(rate.z * 1000)), "flagged": 1 if rate.flagged else 0}
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

    # --- lifecycle ---

    def bootstrap(self, genesis: Block, algorithm: str) -> None:
        status, reasons = self.journal.commit_genesis(genesis)
        if status == "rejected":
            raise RuntimeError(f"genesis rejected: {reasons}")
        self._pending_head_events.clear()
        self._activate_engine(algorithm)

    def crash(self) -> None:
        self.crashed = True
        self.transport.crashed.add(self.node_id)
        logger.info("%s: crashed at %d ms", self.name, self.scheduler.now_ms)

    def recover(self) -> None:
        self.crashed = False
        self.transport.crashed.discard(self.node_id)
        logger.info("%s: recovered at %d ms", self.name, self.scheduler.now_ms)
        if self.engine is not None:
            self.engine.on_recover(self.scheduler.now_ms)


# --- scenario execution ---


@dataclass
class SensorSpec:
    count: int = 0
    sample_interval_ms: int = 5000
    flush_count: int = 10
    flush_age_s: int = 60
    source_flags: tuple[str, ...] = ("citizen", "government", "institutional", "other")


@dataclass
class Scenario:
    name: str
    seed: int = 42
    nodes: int = 4
    algorithm: str = "poet_cft"
    m: int = 0
    target_block_interval_ms: int = 1000
    min_connectivity: int = 3
    max_connectivity: int = 8
    latency_ms: tuple[int, int] = (5, 25)
    drop_rate: float = 0.0
    partitions: tuple = ()
    duration_ms: int = 60_000
    drain_ms: int = DEFAULT_DRAIN_MS
    sensors: SensorSpec = field(default_factory=SensorSpec)
    faults: tuple = ()
    settings_schedule: tuple = ()  # ({"at_ms", "key", "value"}, ...)
    workload_batches_every_ms: int = 0  # synthetic one-reading batches

    @classmethod
    def from_record(cls, rec: dict) -> "Scenario":
        sensors = rec.get("sensors", {})
        return cls(
            name=rec.get("name", "scenario"),
            seed=rec.get("seed", 42),
            nodes=rec["nodes"],
            algorithm=rec.get("algorithm", "poet_cft"),
            m=rec.get("m", 0),
            target_block_interval_ms=rec.get("target_block_interval_ms", 1000),
            min_connectivity=rec.get("min_connectivity", 3),
            max_connectivity=rec.get("max_connectivity", 8),
            latency_ms=tuple(rec.get("latency_ms", (5, 25))),
            drop_rate=float(rec.get("drop_rate", 0.0)),
            partitions=tuple(tuple(p) for p in rec.get("partitions", ())),
            duration_ms=rec.get("duration_ms", 60_000),
            drain_ms=rec.get("drain_ms", DEFAULT_DRAIN_MS),
            sensors=SensorSpec(
                count=sensors.get("count", 0),
                sample_interval_ms=sensors.get("sample_interval_ms", 5000),
                flush_count=sensors.get("flush_count", 10),
                flush_age_s=sensors.get("flush_age_s", 60),
            ),
            faults=tuple(rec.get("faults", ())),
            settings_schedule=tuple(rec.get("settings", ())),
            workload_batches_every_ms=rec.get("workload_batches_every_ms", 0),
        )


class SensorSim:
    """One emulated device feeding a node's REST surface through the
    serial parser, calibration and flush trigger."""

    def __init__(self, index: int, scenario: Scenario, target: SimValidatorNode,
                 api_key: str, master_seed: int):
        self.index = index
        self.target = target
        self.api_key = api_key
        self.rng = random.Random(derive_seed(master_seed, f"sensor:{index}"))
        signer = derive_keypair(master_seed, f"sensor:{index}")
        flag = SourceFlag(
            scenario.sensors.source_flags[index % len(scenario.sensors.source_flags)]
        )
        self.pipeline = DevicePipeline(
            signer=signer,
            api_key=api_key,
            lat_udeg=self.rng.randint(-60_000_000, 60_000_000),
            lon_udeg=self.rng.randint(-170_000_000, 170_000_000),
            source_flag=flag,
            noise=SensorNoiseModel(),
            trigger=BatchTriggerConfig(
                count_threshold=scenario.sensors.flush_count,
                age_threshold_s=scenario.sensors.flush_age_s,
            ),
        )
        self.base_pm25 = self.rng.uniform(8.0, 60.0)
        self.accepted_batch_ids: list[str] = []
        self.rejections: list[str] = []

    def tick(self, now_ms: int) -> None:
        now_s = now_ms // 1000
        pm25 = max(0.0, self.base_pm25 + self.rng.uniform(-3.0, 3.0))
        true_values = (0.7 * pm25, pm25, 1.4 * pm25)
        text = self.pipeline.sample(true_values, self.rng, now_s)
        # split the serial text at an arbitrary byte to exercise the carry
        cut = self.rng.randint(0, len(text))
        self.pipeline.feed_serial(text[:cut], now_s)
        self.pipeline.feed_serial(text[cut:], now_s)
        readings = self.pipeline.maybe_flush(now_s)
        if readings:
            self.submit(readings)

    def submit(self, readings) -> None:
        txns = [
            ledger.build_transaction(
                canonical_encode(r.to_record()),
                family="airquality",
                signer=self.pipeline.signer,
                rng=self.rng,
            )
            for r in readings
        ]
        batch = ledger.build_batch(txns, self.pipeline.signer)
        body = ledger.encode_batch_list([batch])
        status, record = api.handle_submit_batches(self.target, body, self.api_key)
        receipts = record.get("receipts", [])
        if receipts and receipts[0].get("status") == "accepted":
            self.accepted_batch_ids.append(receipts[0]["batch_id"])
        else:
            self.rejections.append(str(record))


class ScenarioRunner:
    """Builds the network from a scenario record and drives it to a report."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.scheduler = Scheduler()
        self.transport = SimTransport(
            self.scheduler,
            SimTransportConfig(
                latency_ms=scenario.latency_ms,
                drop_rate=scenario.drop_rate,
                partitions=scenario.partitions,
                seed=derive_seed(scenario.seed, "transport"),
            ),
        )
        self.registry = Registry(clock=lambda: self.scheduler.now_ms // 1000)
        self.genesis_signer = derive_keypair(scenario.seed, "genesis")
        self.node_signers = [
            derive_keypair(scenario.seed, f"node:{i}") for i in range(scenario.nodes)
        ]
        membership = sorted(kp.public_key for kp in self.node_signers)
        params = ConsensusParams(
            n=scenario.nodes,
            m=scenario.m,
            algorithm=scenario.algorithm,
            target_block_interval_ms=scenario.target_block_interval_ms,
        )
        self.nodes: list[SimValidatorNode] = []
        for i, signer in enumerate(self.node_signers):
            node = SimValidatorNode(
                name=f"node{i}",
                signer=signer,
                scheduler=self.scheduler,
                transport=self.transport,
                params=params,
                membership=membership,
                registry=self.registry,
                rng=random.Random(derive_seed(scenario.seed, f"engine:{i}")),
            )
            node.peer_table.min_connectivity = scenario.min_connectivity
            node.peer_table.max_connectivity = scenario.max_connectivity
            self.nodes.append(node)
        self.by_id = {n.node_id: n for n in self.nodes}
        self.byzantine_ids: set[str] = set()
        self.sensors: list[SensorSim] = []
        self.operator_key = self.registry.issue_key("operator")
        self.synthetic_accepted: list[str] = []
        self._apply_faults_pre()

    # --- fault configuration that must precede engine creation ---

    def _resolve_fault_node(self, fault: dict) -> SimValidatorNode:
        if "view_leader" in fault:
            membership = sorted(n.node_id for n in self.nodes)
            leader_id = membership[fault["view_leader"] % len(membership)]
            return self.by_id[leader_id]
        return self.nodes[fault["node"]]

    def _apply_faults_pre(self) -> None:
        colluders = [
            self._resolve_fault_node(f).node_id
            for f in self.scenario.faults
            if f.get("type") == "equivocate"
        ]
        for fault in self.scenario.faults:
            kind = fault.get("type")
            if kind == "equivocate":
                node = self._resolve_fault_node(fault)
                mode = fault.get("mode", "equivocate")
                self.byzantine_ids.add(node.node_id)

                def factory(name, node=node, mode=mode):
                    if name != "pbft":
                        return None
                    return ByzantinePbftEngine(
                        node.params, node.node_id, node.membership, node, node.rng,
                        mode=mode, colluders=colluders,
                    )

                node._fault_engine_factory = factory
            elif kind == "cheat_wait":
                node = self._resolve_fault_node(fault)
                self.byzantine_ids.add(node.node_id)

                def factory(name, node=node):
                    engine = create_engine(
                        name, node.params, node.node_id, node.membership, node, node.rng
                    )
                    if name == "poet_cft":
                        engine.cheat_zero_wait = True
                    return engine

                node._fault_engine_factory = factory

    def _schedule_faults(self) -> None:
        for fault in self.scenario.faults:
            kind = fault.get("type")
            if kind == "crash":
                node = self.nodes[fault["node"]]
                at = fault["at_ms"]
                duration = fault.get("duration_ms", 10_000)
                self.scheduler.at(at, node.crash)
                self.scheduler.at(at + duration, node.recover)
            elif kind == "crash_leader":
                every = fault["every_ms"]
                duration = fault.get("duration_ms", 10_000)
                until = fault.get("until_ms", self.scenario.duration_ms)
                t = every
                while t < until:
                    self.scheduler.at(t, lambda: self._crash_current_leader(duration))
                    t += every

    def _crash_current_leader(self, duration_ms: int) -> None:
        for node in self.nodes:
            engine = node.engine
            if (
                not node.crashed
                and engine is not None
                and getattr(engine, "role", None) == "leader"
            ):
                node.crash()
                self.scheduler.at(duration_ms, node.recover)
                return

    # --- workload ---

    def _schedule_sensors(self) -> None:
        spec = self.scenario.sensors
        stop_at = max(0, self.scenario.duration_ms - self.scenario.drain_ms)
        for i in range(spec.count):
            target = self.nodes[i % len(self.nodes)]
            key = self.registry.issue_key(f"device-{i}")
            sensor = SensorSim(i, self.scenario, target, key, self.scenario.seed)
            self.sensors.append(sensor)
            offset = (i * spec.sample_interval_ms) // max(1, spec.count)

            def tick(sensor=sensor, interval=spec.sample_interval_ms):
                if self.scheduler.now_ms >= stop_at:
                    return
                if not sensor.target.crashed:
                    sensor.tick(self.scheduler.now_ms)
                self.scheduler.at(interval, tick)

            self.scheduler.at(offset, tick)

    def _schedule_synthetic_workload(self) -> None:
        every = self.scenario.workload_batches_every_ms
        if not every:
            return
        stop_at = max(0, self.scenario.duration_ms - self.scenario.drain_ms)
        rng = random.Random(derive_seed(self.scenario.seed, "workload"))
        signer = derive_keypair(self.scenario.seed, "workload")
        key = self.registry.issue_key("workload")
        counter = [0]

        def tick():
            if self.scheduler.now_ms >= stop_at:
                return
            counter[0] += 1
            reading = {
                "pm1_0": rng.randint(0, 40),
                "pm2_5": rng.randint(0, 200),
                "pm10_0": rng.randint(0, 400),
                "lat_udeg": rng.randint(-89_000_000, 89_000_000),
                "lon_udeg": rng.randint(-179_000_000, 179_000_000),
                "timestamp_s": self.scheduler.now_ms // 1000,
                "source_flag": "citizen",
                "reporter_public_key": signer.public_key,
            }
            txn = ledger.build_transaction(
                canonical_encode(reading), family="airquality", signer=signer, rng=rng
            )
            batch = ledger.build_batch([txn], signer)
            target = self.nodes[counter[0] % len(self.nodes)]
            if not target.crashed:
                status, record = api.handle_submit_batches(
                    target, ledger.encode_batch_list([batch]), key
                )
                receipts = record.get("receipts", [])
                if receipts and receipts[0].get("status") == "accepted":
                    self.synthetic_accepted.append(batch.id)
            self.scheduler.at(every, tick)

        self.scheduler.at(every, tick)

    def _schedule_settings(self) -> None:
        signer = self.genesis_signer
        rng = random.Random(derive_seed(self.scenario.seed, "settings"))
        for entry in self.scenario.settings_schedule:
            def submit(entry=entry):
                txn = ledger.build_transaction(
                    encode_setting(entry["key"], entry["value"]),
                    family="settings",
                    signer=signer,
                    rng=rng,
                )
                batch = ledger.build_batch([txn], signer)
                target = self.nodes[0]
                api.handle_submit_batches(
                    target, ledger.encode_batch_list([batch]), self.operator_key
                )
            self.scheduler.at(entry["at_ms"], submit)

    # --- genesis / peering / run ---

    def build_genesis(self) -> Block:
        executor = self.nodes[0].journal.executor
        txn = ledger.build_transaction(
            encode_setting(CONSENSUS_KEY, self.scenario.algorithm),
            family="settings",
            signer=self.genesis_signer,
            rng=random.Random(derive_seed(self.scenario.seed, "genesis-nonce")),
        )
        batch = ledger.build_batch([txn], self.genesis_signer)
        from airchain.trie import EMPTY_ROOT

        root, violations = executor.execute_batch(EMPTY_ROOT, batch, 0)
        if violations:
            raise RuntimeError(f"genesis batch invalid: {violations}")
        return ledger.build_block(
            block_num=0,
            previous_block_id=ledger.GENESIS_PREVIOUS,
            batches=[batch],
            state_root_hash=root,
            signer=self.genesis_signer,
            consensus_payload=canonical_encode({"alg": "genesis"}),
        )

    def peer_network(self) -> int:
        tables = {n.node_id: n.peer_table for n in self.nodes}
        for table in tables.values():
            for other in tables:
                table.learn(other)
        rounds = run_peering(tables)
        if not is_fully_peered(tables.values()):
            raise RuntimeError("network failed to peer")
        return rounds

    def run(self) -> dict:
        scenario = self.scenario
        genesis = self.build_genesis()
        peer_rounds = self.peer_network()
        for node in self.nodes:
            node.bootstrap(genesis, scenario.algorithm)
        self._schedule_sensors()
        self._schedule_synthetic_workload()
        self._schedule_settings()
        self._schedule_faults()
        self.scheduler.run_until(scenario.duration_ms)
        return self.report(peer_rounds)

    # --- report ---

    def report(self, peer_rounds: int = 0) -> dict:
        scenario = self.scenario
        honest = [n for n in self.nodes if n.node_id not in self.byzantine_ids]
        violations: list[str] = []

        # identical honest heads
        head_ids = sorted({n.store.head.id for n in honest if n.store.head})
        heads_identical = len(head_ids) == 1

        # per-height agreement among honest nodes (final chains)
        heights: dict[int, set[str]] = {}
        for node in honest:
            for block in node.store.chain():
                heights.setdefault(block.block_num, set()).add(block.id)
        for num in sorted(heights):
            if len(heights[num]) > 1:
                violations.append(
                    f"safety: honest nodes committed {len(heights[num])} different "
                    f"blocks at height {num}"
                )

        # per-height agreement over full commit histories, where the engine
        # is non-forking; ordinary poet fork resolution is not a violation
        final_committed: dict[int, set[str]] = {}
        for node in honest:
            for _, num, block_id, engine_name in node.commit_history:
                if engine_name in ("pbft", "raft"):
                    final_committed.setdefault(num, set()).add(block_id)
        for num in sorted(final_committed):
            if len(final_committed[num]) > 1:
                violations.append(
                    f"safety: commit histories diverge at height {num} "
                    f"({len(final_committed[num])} block ids)"
                )
        for node in honest:
            for problem in node.finality_violations:
                violations.append(f"finality[{node.name}]: {problem}")

        # raft: at most one leader per term
        term_leaders: dict[int, set[str]] = {}
        for node in self.nodes:
            engine = node.engine
            for term in getattr(engine, "leadership_terms", []):
                term_leaders.setdefault(term, set()).add(node.name)
        for term in sorted(term_leaders):
            if len(term_leaders[term]) > 1:
                violations.append(
                    f"raft: term {term} had leaders {sorted(term_leaders[term])}"
                )

        # batch inclusion among accepted submissions
        accepted = sorted(
            {bid for s in self.sensors for bid in s.accepted_batch_ids}
            | set(self.synthetic_accepted)
        )
        committed = set()
        if honest:
            committed = set(honest[0].journal.committed_batch_ids)
        missing = [b for b in accepted if b not in committed]

        z_flags = sorted(
            {
                node_key[:16]
                for node in honest
                for node_key, rate in node.win_tracker.zscores(len(self.nodes)).items()
                if rate.flagged
            }
        )
        view_changes = sum(
            n.view_changes_total
            + (n.engine.view_change_count if isinstance(n.engine, PbftEngine) else 0)
            for n in self.nodes
        )
        report = {
            "scenario": scenario.name,
            "seed": scenario.seed,
            "elapsed_ms": self.scheduler.now_ms,
            "peer_rounds": peer_rounds,
            "engine": scenario.algorithm,
            "heads_identical": 1 if heads_identical else 0,
            "head_ids": head_ids,
            "nodes": {
                node.name: {
                    "head_num": node.store.head.block_num if node.store.head else -1,
                    "head_id": node.store.head.id if node.store.head else "",
                    "blocks": len(list(node.store.chain())),
                    "engine": node.engine_name or "",
                    "byzantine": 1 if node.node_id in self.byzantine_ids else 0,
                }
                for node in self.nodes
            },
            "messages_sent": self.transport.sent,
            "messages_delivered": self.transport.delivered,
            "messages_dropped": self.transport.dropped,
            "view_changes": view_changes,
            "accepted_batches": len(accepted),
            "missing_batches": len(missing),
            "z_flags": z_flags,
            "violations": violations,
        }
        return report


def run_scenario_record(record: dict) -> dict:
    return ScenarioRunner(Scenario.from_record(record)).run()


def gossip_probe(runner: ScenarioRunner, origin_index: int = 0) -> dict:
    """Flood one marker message from a node; report which nodes saw it."""
    origin = runner.nodes[origin_index]
    marker = f"probe-{derive_seed(runner.scenario.seed, 'probe'):x}"
    origin._gossip_originate("probe", marker, {"probe": marker})
    runner.scheduler.run_until_idle(runner.scheduler.now_ms + 3_600_000)
    reached = [n.name for n in runner.nodes if marker in n.seen_gossip]
    return {"origin": origin.name, "reached": sorted(reached)}
