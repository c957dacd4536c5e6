"""Elapsed-time lottery consensus (crash fault tolerant).

Every round each node draws an exponential wait; the first timer to
expire publishes the next block and gossips it.  Nothing enforces an
honestly drawn wait, which is exactly why win rates are z-tested and
over-winners flagged (see analysis.WinTracker).
"""

from __future__ import annotations

import math
from typing import Optional

from airchain.consensus.base import ConsensusError, Engine, encode_payload, decode_payload, register_engine
from airchain.ledger import Block, BlockHeader

DEFAULT_MEAN_WAIT_MS = 3000


def poet_draw_wait(mean_wait_ms: int, rng) -> int:
    """One lottery wait: ceil(-mean * ln(u)) with u uniform in (0, 1]."""
    if mean_wait_ms <= 0:
        raise ConsensusError("mean wait must be positive")
    u = 1.0 - rng.random()  # (0, 1]
    return math.ceil(-mean_wait_ms * math.log(u))


def poet_elect(waits: dict) -> str:
    """Winner of a round: smallest wait, ties to the smaller node id."""
    if not waits:
        raise ConsensusError("cannot elect from empty waits")
    return min(waits.items(), key=lambda kv: (kv[1], kv[0]))[0]


@register_engine
class PoetEngine(Engine):
    name = "poet_cft"

    def __init__(self, params, node_id, membership, services, rng):
        super().__init__(params, node_id, membership, services, rng)
        self.mean_wait_ms = params.target_block_interval_ms or DEFAULT_MEAN_WAIT_MS
        self.round = 0
        self.wait_ms = 0
        self.deadline_ms: Optional[int] = None
        self.cheat_zero_wait = False  # fault-script hook

    def start(self, now_ms: int) -> None:
        head = self.services.head()
        self._new_round(head, now_ms)

    def _new_round(self, head: Optional[Block], now_ms: int) -> None:
        self.round = head.block_num + 1 if head else 0
        self.wait_ms = 0 if self.cheat_zero_wait else poet_draw_wait(self.mean_wait_ms, self.rng)
        self.deadline_ms = now_ms + self.wait_ms
        self.services.set_timer("poet_publish", self.wait_ms)

    def on_timer(self, name: str, now_ms: int) -> None:
        if name != "poet_publish":
            return
        block = self.services.try_publish()
        if block is None:
            # wait elapsed but nothing to publish; retry without redrawing
            self.services.set_timer("poet_publish", max(1, self.mean_wait_ms // 4))

    def on_batches_available(self, now_ms: int) -> None:
        if self.deadline_ms is not None and now_ms >= self.deadline_ms:
            self.services.try_publish()

    def may_publish(self, now_ms: Optional[int]) -> Optional[bytes]:
        if self.deadline_ms is None or now_ms is None or now_ms < self.deadline_ms:
            return None
        return encode_payload(
            {
                "alg": self.name,
                "round": self.round,
                "wait_ms": self.wait_ms,
                "node": self.node_id,
            }
        )

    def on_block_built(self, block: Block, now_ms: int) -> None:
        status = self.services.commit_block(block)
        if status in ("extended", "fork-switched"):
            self.services.gossip_block(block)

    def on_head_updated(self, head: Block, now_ms: int) -> None:
        self._new_round(head, now_ms)

    def fork_preference(self, a: Block, b: Block) -> Optional[Block]:
        try:
            wait_a = decode_payload(a.header).get("wait_ms")
            wait_b = decode_payload(b.header).get("wait_ms")
        except ConsensusError:
            return None
        if isinstance(wait_a, int) and isinstance(wait_b, int) and wait_a != wait_b:
            return a if wait_a < wait_b else b
        return None

    @staticmethod
    def verify_payload(header: BlockHeader, prev: Optional[BlockHeader]) -> tuple[bool, str]:
        try:
            rec = decode_payload(header)
        except ConsensusError as exc:
            return False, str(exc)
        if rec.get("alg") != PoetEngine.name:
            return False, f"payload algorithm {rec.get('alg')!r} is not poet_cft"
        if rec.get("round") != header.block_num:
            return False, f"round {rec.get('round')} != block_num {header.block_num}"
        wait = rec.get("wait_ms")
        if not isinstance(wait, int) or wait < 0:
            return False, f"invalid wait {wait!r}"
        if rec.get("node") != header.signer_public_key:
            return False, "winner does not match block signer"
        return True, ""
