"""Simplified practical Byzantine fault tolerance.

Three-phase progression per (view, sequence): the view leader
pre-prepares a candidate block, replicas validate it and broadcast
prepares, a replica with 2f matching prepares broadcasts commit, and
2f + 1 matching commits commit the block locally.  A stalled sequence
times out into a view change that rotates the leader to (view + 1) mod n.
Checkpointing and garbage collection are out of scope at desk scale.

Byzantine behavior used by fault scenarios lives in ByzantinePbftEngine:
"equivocate" sends conflicting pre-prepares; "split" additionally echoes
prepare/commit for both digests to disjoint halves of the honest nodes,
which with enough colluders produces a detectable safety violation.
"""

from __future__ import annotations

import logging
from typing import Optional

from airchain import ledger
from airchain.consensus.analysis import max_faults
from airchain.consensus.base import (
    ConsensusError,
    Engine,
    decode_payload,
    encode_payload,
    register_engine,
)
from airchain.ledger import Block, BlockHeader

logger = logging.getLogger(__name__)

PHASE_IDLE = "idle"
PHASE_PRE_PREPARED = "pre-prepared"
PHASE_PREPARED = "prepared"
PHASE_COMMITTED = "committed"

VIEW_CHANGE_TIMEOUT_FACTOR = 4


@register_engine
class PbftEngine(Engine):
    name = "pbft"

    def __init__(self, params, node_id, membership, services, rng):
        super().__init__(params, node_id, membership, services, rng)
        self.f = max_faults(len(self.membership))
        self.view = 0
        self.sequence = 0
        self.phase = PHASE_IDLE
        self.working_digest: Optional[str] = None
        # (type, view, seq, digest) -> set of senders
        self.message_log: dict[tuple, set] = {}
        self.candidates: dict[str, Block] = {}
        self.view_changes: dict[int, set] = {}
        self.view_change_count = 0
        self.interval_ms = params.target_block_interval_ms
        self.timeout_ms = VIEW_CHANGE_TIMEOUT_FACTOR * self.interval_ms
        self._vc_armed = False

    # --- helpers ---

    def leader(self, view: Optional[int] = None) -> str:
        view = self.view if view is None else view
        return self.membership[view % len(self.membership)]

    def is_leader(self) -> bool:
        return self.leader() == self.node_id

    def _log_message(self, kind: str, view: int, seq: int, digest: str, sender: str) -> int:
        key = (kind, view, seq, digest)
        senders = self.message_log.setdefault(key, set())
        senders.add(sender)
        return len(senders)

    def _count(self, kind: str, digest: str) -> int:
        return len(self.message_log.get((kind, self.view, self.sequence, digest), ()))

    def _reset_sequence(self, head: Optional[Block]) -> None:
        self.sequence = head.block_num + 1 if head else 0
        self.phase = PHASE_IDLE
        self.working_digest = None

    def _arm_viewchange(self, force: bool = False) -> None:
        # re-arming on every event would postpone the stall detector forever
        if force or not self._vc_armed:
            self._vc_armed = True
            self.services.set_timer("pbft_viewchange", self.timeout_ms)

    def _disarm_viewchange(self) -> None:
        self._vc_armed = False
        self.services.cancel_timer("pbft_viewchange")

    # --- engine hooks ---

    def start(self, now_ms: int) -> None:
        self._reset_sequence(self.services.head())
        self.services.set_timer("pbft_publish", self.interval_ms)

    def on_timer(self, name: str, now_ms: int) -> None:
        if name == "pbft_publish":
            if self.is_leader() and self.phase == PHASE_IDLE:
                self.services.try_publish()
            self.services.set_timer("pbft_publish", self.interval_ms)
        elif name == "pbft_viewchange":
            self._vc_armed = False
            self._start_view_change(self.view + 1, now_ms)

    def on_batches_available(self, now_ms: int) -> None:
        # replicas arm the stall detector as soon as there is work pending
        self._arm_viewchange()

    def may_publish(self, now_ms: Optional[int]) -> Optional[bytes]:
        if not self.is_leader() or self.phase != PHASE_IDLE:
            return None
        return encode_payload(
            {"alg": self.name, "view": self.view, "sequence": self.sequence}
        )

    def on_block_built(self, block: Block, now_ms: int) -> None:
        message = {
            "t": "pre_prepare",
            "view": self.view,
            "seq": block.block_num,
            "digest": block.id,
            "block": block.to_record(),
        }
        self.services.broadcast(message)
        self.on_message(self.node_id, message, now_ms)

    def on_message(self, sender: str, message: dict, now_ms: int) -> None:
        kind = message.get("t")
        if kind == "pre_prepare":
            self._on_pre_prepare(sender, message, now_ms)
        elif kind == "prepare":
            self._on_prepare(sender, message, now_ms)
        elif kind == "commit":
            self._on_commit(sender, message, now_ms)
        elif kind == "view_change":
            self._on_view_change(sender, message, now_ms)

    def _stale(self, message: dict) -> bool:
        return message.get("view") != self.view or message.get("seq") != self.sequence

    def _on_pre_prepare(self, sender: str, message: dict, now_ms: int) -> None:
        if self._stale(message) or sender != self.leader():
            logger.debug("%s: ignoring stale/rogue pre-prepare", self.node_id[:8])
            return
        if self.phase != PHASE_IDLE:
            return
        digest = message["digest"]
        try:
            block = Block.from_record(message["block"])
        except Exception:
            return
        if block.id != digest or not self.services.validate_candidate(block):
            return
        self.candidates[digest] = block
        self.working_digest = digest
        self.phase = PHASE_PRE_PREPARED
        self._log_message("pre_prepare", self.view, self.sequence, digest, sender)
        self._arm_viewchange(force=True)
        prepare = {
            "t": "prepare",
            "view": self.view,
            "seq": self.sequence,
            "digest": digest,
        }
        self.services.broadcast(prepare)
        self._log_message("prepare", self.view, self.sequence, digest, self.node_id)
        self._maybe_advance(now_ms)

    def _on_prepare(self, sender: str, message: dict, now_ms: int) -> None:
        if self._stale(message):
            return
        self._log_message("prepare", self.view, self.sequence, message["digest"], sender)
        self._maybe_advance(now_ms)

    def _on_commit(self, sender: str, message: dict, now_ms: int) -> None:
        if self._stale(message):
            return
        self._log_message("commit", self.view, self.sequence, message["digest"], sender)
        self._maybe_advance(now_ms)

    def _maybe_advance(self, now_ms: int) -> None:
        """Run all quorum transitions enabled by the current message log."""
        digest = self.working_digest
        if digest is None:
            return
        if (
            self.phase == PHASE_PRE_PREPARED
            and self._count("prepare", digest) >= 2 * self.f
        ):
            self.phase = PHASE_PREPARED
            commit = {
                "t": "commit",
                "view": self.view,
                "seq": self.sequence,
                "digest": digest,
            }
            self.services.broadcast(commit)
            self._log_message("commit", self.view, self.sequence, digest, self.node_id)
        if (
            self.phase == PHASE_PREPARED
            and self._count("commit", digest) >= 2 * self.f + 1
        ):
            self.phase = PHASE_COMMITTED
            block = self.candidates.get(digest)
            if block is not None:
                self.services.commit_block(block)
                self.services.gossip_block(block)

    def _start_view_change(self, new_view: int, now_ms: int) -> None:
        message = {"t": "view_change", "new_view": new_view}
        self.services.broadcast(message)
        self._on_view_change(self.node_id, message, now_ms)
        # keep escalating if this view change also stalls
        self._arm_viewchange(force=True)

    def _on_view_change(self, sender: str, message: dict, now_ms: int) -> None:
        new_view = message.get("new_view", 0)
        if not isinstance(new_view, int) or new_view <= self.view:
            return
        senders = self.view_changes.setdefault(new_view, set())
        senders.add(sender)
        # join a view change once f+1 peers attest the current view stalled
        if len(senders) >= self.f + 1 and self.node_id not in senders:
            senders.add(self.node_id)
            self.services.broadcast({"t": "view_change", "new_view": new_view})
        if len(senders) >= 2 * self.f + 1:
            self.view = new_view
            self.view_change_count += 1
            self._reset_sequence(self.services.head())
            logger.info(
                "%s: view change to %d, leader %s",
                self.node_id[:8],
                new_view,
                self.leader()[:8],
            )
            if self.services.pending_batch_count():
                self._arm_viewchange(force=True)
            else:
                self._disarm_viewchange()

    def on_head_updated(self, head: Block, now_ms: int) -> None:
        self._reset_sequence(head)
        if self.services.pending_batch_count():
            self._arm_viewchange(force=True)
        else:
            self._disarm_viewchange()

    def fork_preference(self, a: Block, b: Block) -> Optional[Block]:
        # quorum commitment is final: never switch away from our head
        head = self.services.head()
        if head is not None:
            if a.id == head.id:
                return a
            if b.id == head.id:
                return b
        return None

    @staticmethod
    def verify_payload(header: BlockHeader, prev: Optional[BlockHeader]) -> tuple[bool, str]:
        try:
            rec = decode_payload(header)
        except ConsensusError as exc:
            return False, str(exc)
        if rec.get("alg") != PbftEngine.name:
            return False, f"payload algorithm {rec.get('alg')!r} is not pbft"
        if rec.get("sequence") != header.block_num:
            return False, f"sequence {rec.get('sequence')} != block_num {header.block_num}"
        view = rec.get("view")
        if not isinstance(view, int) or view < 0:
            return False, f"invalid view {view!r}"
        return True, ""


class ByzantinePbftEngine(PbftEngine):
    """Faulty replica used in scenarios: equivocates as leader, and in
    "split" mode colludes to vote both ways toward disjoint halves of
    the honest nodes.

    Digest-to-half assignment is by sorted digest against the sorted
    honest membership, so every colluder pushes the same digest at the
    same victims without coordination messages.
    """

    def __init__(self, params, node_id, membership, services, rng,
                 mode="equivocate", colluders=()):
        super().__init__(params, node_id, membership, services, rng)
        self.mode = mode
        self.colluders = set(colluders) | {node_id}

    def _honest_halves(self) -> tuple[list, list]:
        honest = [m for m in self.membership if m not in self.colluders]
        half = (len(honest) + 1) // 2
        return honest[:half], honest[half:]

    def _pre_prepare_msg(self, block: Block) -> dict:
        return {
            "t": "pre_prepare",
            "view": self.view,
            "seq": block.block_num,
            "digest": block.id,
            "block": block.to_record(),
        }

    def on_block_built(self, block: Block, now_ms: int) -> None:
        twin = ledger.build_block(
            block_num=block.block_num,
            previous_block_id=block.header.previous_block_id,
            batches=block.batches,
            state_root_hash=block.header.state_root_hash,
            signer=self.services.signer,
            consensus_payload=encode_payload(
                {
                    "alg": self.name,
                    "view": self.view,
                    "sequence": self.sequence,
                    "twin": 1,
                }
            ),
        )
        low, high = sorted((block, twin), key=lambda blk: blk.id)
        first, second = self._honest_halves()
        for half, chosen in ((first, low), (second, high)):
            for peer in half:
                self.services.send(peer, self._pre_prepare_msg(chosen))
        for peer in self.colluders - {self.node_id}:
            self.services.send(peer, self._pre_prepare_msg(low))
            self.services.send(peer, self._pre_prepare_msg(high))
        if self.mode == "split":
            for chosen in (low, high):
                self._log_message(
                    "pre_prepare", self.view, self.sequence, chosen.id, self.node_id
                )
            self._mirror_votes(self.view, self.sequence)

    def _mirror_votes(self, view: int, seq: int) -> None:
        """Send prepare+commit for each equivocated digest to its half."""
        digests = sorted(
            d
            for (k, v, s, d) in self.message_log
            if k == "pre_prepare" and v == view and s == seq
        )
        for half, digest in zip(self._honest_halves(), digests[:2]):
            for kind in ("prepare", "commit"):
                echo = {"t": kind, "view": view, "seq": seq, "digest": digest}
                for peer in half:
                    self.services.send(peer, echo)

    def on_message(self, sender: str, message: dict, now_ms: int) -> None:
        if self.mode != "split":
            return super().on_message(sender, message, now_ms)
        kind = message.get("t")
        if kind == "pre_prepare":
            self._log_message(
                "pre_prepare", message["view"], message["seq"], message["digest"], sender
            )
            self._mirror_votes(message["view"], message["seq"])
        elif kind == "view_change":
            super().on_message(sender, message, now_ms)
