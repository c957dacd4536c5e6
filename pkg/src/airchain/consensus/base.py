"""Engine-independent consensus plumbing.

Engines are deterministic state machines: nodes feed them messages and
timer events, engines call back through a small services surface (send,
broadcast, timers, publish, commit).  The consensus payload carried in
every block header is an engine-tagged canonical record, so a finished
chain can be re-verified offline under the engine active at each height.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

from airchain.codec import CodecError, canonical_decode, canonical_encode
from airchain.ledger import Block, BlockHeader
from airchain.settings import CONSENSUS_KEY, KNOWN_ALGORITHMS, get_setting

DEFAULT_BLOCK_INTERVAL_MS = 1000


class ConsensusError(ValueError):
    pass


@dataclass(frozen=True)
class ConsensusParams:
    n: int
    m: int
    algorithm: str
    target_block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS

    def __post_init__(self):
        if self.n < 1:
            raise ConsensusError("n must be at least 1")
        if not 0 <= self.m < self.n:
            raise ConsensusError("m must satisfy 0 <= m < n")
        if self.algorithm not in KNOWN_ALGORITHMS:
            raise ConsensusError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "pbft" and self.n < 3 * self.m + 1:
            raise ConsensusError("pbft activation requires n >= 3m + 1")


def encode_payload(record: dict) -> bytes:
    return canonical_encode(record)


def decode_payload(header: BlockHeader) -> dict:
    try:
        return canonical_decode(header.consensus_payload)
    except CodecError as exc:
        raise ConsensusError(f"malformed consensus payload: {exc}") from exc


class EngineServices(Protocol):
    """What a node runtime provides to its engine."""

    node_id: str
    signer: object

    def send(self, to: str, message: dict) -> None: ...

    def broadcast(self, message: dict) -> None: ...

    def set_timer(self, name: str, delay_ms: int) -> None: ...

    def cancel_timer(self, name: str) -> None: ...

    def try_publish(self) -> Optional[Block]: ...

    def commit_block(self, block: Block) -> str: ...

    def validate_candidate(self, block: Block) -> bool: ...

    def gossip_block(self, block: Block) -> None: ...

    def head(self) -> Optional[Block]: ...

    def get_block_by_num(self, block_num: int) -> Optional[Block]: ...

    def pending_batch_count(self) -> int: ...


class Engine:
    """Base class; engines override the event hooks they care about."""

    name = "base"

    def __init__(self, params: ConsensusParams, node_id: str, membership, services, rng):
        self.params = params
        self.node_id = node_id
        self.membership = sorted(membership)
        self.services = services
        self.rng = rng

    def start(self, now_ms: int) -> None:
        pass

    def stop(self) -> None:
        pass

    def on_message(self, sender: str, message: dict, now_ms: int) -> None:
        pass

    def on_timer(self, name: str, now_ms: int) -> None:
        pass

    def on_batches_available(self, now_ms: int) -> None:
        pass

    def on_recover(self, now_ms: int) -> None:
        self.start(now_ms)

    def on_head_updated(self, head: Block, now_ms: int) -> None:
        pass

    def on_block_built(self, block: Block, now_ms: int) -> None:
        pass

    def may_publish(self, now_ms: Optional[int]) -> Optional[bytes]:
        return None

    def fork_preference(self, a: Block, b: Block) -> Optional[Block]:
        return None

    @staticmethod
    def verify_payload(header: BlockHeader, prev: Optional[BlockHeader]) -> tuple[bool, str]:
        return True, ""


_ENGINE_CLASSES: dict[str, type] = {}


def register_engine(cls) -> type:
    _ENGINE_CLASSES[cls.name] = cls
    return cls


def engine_class(name: str) -> type:
    try:
        return _ENGINE_CLASSES[name]
    except KeyError:
        raise ConsensusError(f"unknown consensus algorithm {name!r}") from None


def create_engine(
    name: str, params: ConsensusParams, node_id: str, membership, services, rng
):
    cls = engine_class(name)
    if params.algorithm != name:
        params = ConsensusParams(
            n=params.n,
            m=params.m,
            algorithm=name,
            target_block_interval_ms=params.target_block_interval_ms,
        )
    return cls(params, node_id, membership, services, rng)


def active_algorithm(trie, state_root: str, default: str = "poet_cft") -> str:
    """The engine governing the block after the one with this state root."""
    value = get_setting(trie, state_root, CONSENSUS_KEY)
    return value if value is not None else default


def verify_payload_static(
    algorithm: str, header: BlockHeader, prev: Optional[BlockHeader]
) -> tuple[bool, str]:
    return engine_class(algorithm).verify_payload(header, prev)


def verify_chain(store, trie, default_algorithm: str = "poet_cft") -> tuple[bool, list[str]]:
    """Replay a finished chain, verifying every block under the engine
    active at its height (a setting committed at block k governs k+1)."""
    head = store.head
    if head is None:
        return True, []
    chain = list(store.chain())
    chain.reverse()  # genesis first
    problems = []
    prev: Optional[Block] = None
    for block in chain:
        if block.block_num == 0:
            prev = block
            continue
        algorithm = active_algorithm(trie, prev.header.state_root_hash, default_algorithm)
        ok, reason = verify_payload_static(algorithm, block.header, prev.header)
        if not ok:
            problems.append(
                f"block {block.block_num} ({block.id[:16]}) fails {algorithm} "
                f"verification: {reason}"
            )
        prev = block
    return not problems, problems
