"""Raft consensus over fixed membership.

Followers that stop hearing heartbeats become candidates, gather a
majority of votes for a fresh term, and replicate log entries (whole
blocks) to the cluster; an entry commits once a majority holds it.
Election timeouts are drawn uniformly from [150, 300] simulated ms with
a 50 ms heartbeat, one published block in flight at a time.  Committed
entries are trimmed from the in-memory log because the journal's block
store already holds them; lagging followers are backfilled from there.
"""

from __future__ import annotations

import logging
from typing import Optional

from airchain.consensus.base import (
    ConsensusError,
    Engine,
    decode_payload,
    encode_payload,
    register_engine,
)
from airchain.ledger import Block, BlockHeader

logger = logging.getLogger(__name__)

FOLLOWER = "follower"
CANDIDATE = "candidate"
LEADER = "leader"

ELECTION_TIMEOUT_RANGE_MS = (150, 300)
HEARTBEAT_MS = 50


@register_engine
class RaftEngine(Engine):
    name = "raft"

    def __init__(self, params, node_id, membership, services, rng):
        super().__init__(params, node_id, membership, services, rng)
        self.term = 0
        self.role = FOLLOWER
        self.voted_for: Optional[str] = None
        self.leader_id: Optional[str] = None
        self.log: list[tuple[int, Block]] = []  # uncommitted suffix only
        self.last_committed_term = 0
        self.votes: set[str] = set()
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.leadership_terms: list[int] = []  # terms in which we led (for audits)

    # --- index bookkeeping ---

    def _head_num(self) -> int:
        head = self.services.head()
        return head.block_num if head else -1

    def _last_log_index(self) -> int:
        return self.log[-1][1].block_num if self.log else self._head_num()

    def _last_log_term(self) -> int:
        return self.log[-1][0] if self.log else self.last_committed_term

    def _term_at(self, index: int) -> Optional[int]:
        """Term of the entry at an absolute index, 0 for pre-raft blocks."""
        head_num = self._head_num()
        if index <= head_num:
            block = self.services.get_block_by_num(index)
            if block is None:
                return None
            return _block_term(block)
        for term, block in self.log:
            if block.block_num == index:
                return term
        return None

    # --- timers ---

    def _arm_election(self) -> None:
        low, high = ELECTION_TIMEOUT_RANGE_MS
        self.services.set_timer("raft_election", self.rng.randint(low, high))

    def start(self, now_ms: int) -> None:
        self.role = FOLLOWER
        self.votes = set()
        self._arm_election()

    def stop(self) -> None:
        self.services.cancel_timer("raft_election")
        self.services.cancel_timer("raft_heartbeat")

    def on_timer(self, name: str, now_ms: int) -> None:
        if name == "raft_election" and self.role != LEADER:
            self._start_election(now_ms)
        elif name == "raft_heartbeat" and self.role == LEADER:
            self._leader_tick(now_ms)
            self.services.set_timer("raft_heartbeat", HEARTBEAT_MS)

    def on_batches_available(self, now_ms: int) -> None:
        if self.role == LEADER:
            self._leader_tick(now_ms)

    # --- elections ---

    def _start_election(self, now_ms: int) -> None:
        self.term += 1
        self.role = CANDIDATE
        self.voted_for = self.node_id
        self.votes = {self.node_id}
        self.leader_id = None
        logger.debug("%s: starting election for term %d", self.node_id[:8], self.term)
        self.services.broadcast(
            {
                "t": "request_vote",
                "term": self.term,
                "last_log_index": self._last_log_index(),
                "last_log_term": self._last_log_term(),
            }
        )
        self._arm_election()
        self._maybe_win()

    def _maybe_win(self) -> None:
        if self.role == CANDIDATE and len(self.votes) > len(self.membership) // 2:
            self.role = LEADER
            self.leader_id = self.node_id
            self.leadership_terms.append(self.term)
            last = self._last_log_index()
            self.next_index = {m: last + 1 for m in self.membership if m != self.node_id}
            self.match_index = {m: 0 for m in self.membership if m != self.node_id}
            logger.info("%s: leader for term %d", self.node_id[:8], self.term)
            self.services.cancel_timer("raft_election")
            self.services.set_timer("raft_heartbeat", HEARTBEAT_MS)
            self._leader_tick(None)

    def _step_down(self, term: int) -> None:
        if term > self.term:
            self.term = term
            self.voted_for = None
        if self.role == LEADER:
            self.services.cancel_timer("raft_heartbeat")
        self.role = FOLLOWER
        self.votes = set()
        self._arm_election()

    # --- messages ---

    def on_message(self, sender: str, message: dict, now_ms: int) -> None:
        kind = message.get("t")
        term = message.get("term", 0)
        if term > self.term:
            self._step_down(term)
        if kind == "request_vote":
            self._on_request_vote(sender, message)
        elif kind == "vote":
            if term == self.term and message.get("granted"):
                self.votes.add(sender)
                self._maybe_win()
        elif kind == "append_entries":
            self._on_append_entries(sender, message, now_ms)
        elif kind == "append_reply":
            self._on_append_reply(sender, message)

    def _on_request_vote(self, sender: str, message: dict) -> None:
        term = message["term"]
        granted = False
        if term == self.term and self.voted_for in (None, sender):
            mine = (self._last_log_term(), self._last_log_index())
            theirs = (message["last_log_term"], message["last_log_index"])
            if theirs >= mine:
                granted = True
                self.voted_for = sender
                self._arm_election()
        self.services.send(sender, {"t": "vote", "term": self.term, "granted": granted})

    def _on_append_entries(self, sender: str, message: dict, now_ms: int) -> None:
        term = message["term"]
        if term < self.term:
            self.services.send(
                sender,
                {"t": "append_reply", "term": self.term, "success": False, "match": 0},
            )
            return
        # valid leader for this term
        if self.role != FOLLOWER:
            self._step_down(term)
        self.leader_id = sender
        self._arm_election()

        prev_index = message["prev_index"]
        prev_term = message["prev_term"]
        local_prev_term = self._term_at(prev_index) if prev_index >= 0 else 0
        if prev_index > self._last_log_index() or (
            local_prev_term is not None
            and prev_index >= 0
            and local_prev_term != prev_term
            and prev_index > self._head_num()
        ):
            self.services.send(
                sender,
                {
                    "t": "append_reply",
                    "term": self.term,
                    "success": False,
                    "match": self._head_num(),
                },
            )
            return

        entries = [
            (entry_term, Block.from_record(rec)) for entry_term, rec in message["entries"]
        ]
        if entries:
            first_num = entries[0][1].block_num
            # drop any conflicting uncommitted suffix, then append what's new
            self.log = [e for e in self.log if e[1].block_num < first_num]
            known = {e[1].block_num for e in self.log}
            head_num = self._head_num()
            for entry_term, block in entries:
                if block.block_num <= head_num or block.block_num in known:
                    continue
                self.log.append((entry_term, block))
        self._apply_committed(message["commit"], now_ms)
        self.services.send(
            sender,
            {
                "t": "append_reply",
                "term": self.term,
                "success": True,
                "match": max(prev_index + len(entries), self._head_num()),
            },
        )

    def _apply_committed(self, leader_commit: int, now_ms: int) -> None:
        while self.log and self.log[0][1].block_num <= leader_commit:
            entry_term, block = self.log.pop(0)
            status = self.services.commit_block(block)
            if status in ("extended", "fork-switched"):
                self.last_committed_term = entry_term
            else:
                logger.warning(
                    "%s: raft entry %d not committed (%s)",
                    self.node_id[:8],
                    block.block_num,
                    status,
                )
                break

    def _on_append_reply(self, sender: str, message: dict) -> None:
        if self.role != LEADER or message["term"] != self.term:
            return
        if message["success"]:
            match = message["match"]
            self.match_index[sender] = max(self.match_index.get(sender, 0), match)
            self.next_index[sender] = self.match_index[sender] + 1
            self._advance_commit()
        else:
            hint = message.get("match", 0)
            self.next_index[sender] = max(1, min(self.next_index.get(sender, 1) - 1, hint + 1))

    def _advance_commit(self) -> None:
        """Commit the highest index replicated on a majority in this term."""
        if not self.log:
            return
        indices = sorted(
            list(self.match_index.values()) + [self._last_log_index()], reverse=True
        )
        majority_match = indices[len(self.membership) // 2]
        committable = [
            (t, b)
            for t, b in self.log
            if b.block_num <= majority_match and t == self.term
        ]
        if committable:
            self._apply_committed(committable[-1][1].block_num, 0)

    # --- replication / publication ---

    def _leader_tick(self, now_ms) -> None:
        if not self.log and self.services.pending_batch_count():
            self.services.try_publish()
        head_num = self._head_num()
        for peer in self.next_index:
            self._send_append(peer, head_num)

    def _send_append(self, peer: str, head_num: int) -> None:
        next_idx = self.next_index.get(peer, head_num + 1)
        entries = []
        # backfill committed blocks from the store, then uncommitted log
        cursor = next_idx
        while cursor <= head_num and len(entries) < 8:
            block = self.services.get_block_by_num(cursor)
            if block is None:
                break
            entries.append((_block_term(block), block.to_record()))
            cursor += 1
        for entry_term, block in self.log:
            if block.block_num >= cursor and len(entries) < 8:
                entries.append((entry_term, block.to_record()))
                cursor = block.block_num + 1
        prev_index = next_idx - 1
        prev_term = self._term_at(prev_index) or 0
        self.services.send(
            peer,
            {
                "t": "append_entries",
                "term": self.term,
                "prev_index": prev_index,
                "prev_term": prev_term,
                "entries": entries,
                "commit": head_num,
            },
        )

    def may_publish(self, now_ms: Optional[int]) -> Optional[bytes]:
        if self.role != LEADER or self.log:
            return None
        return encode_payload({"alg": self.name, "term": self.term})

    def on_block_built(self, block: Block, now_ms: int) -> None:
        self.log.append((self.term, block))
        head_num = self._head_num()
        for peer in self.next_index:
            self._send_append(peer, head_num)

    def on_head_updated(self, head: Block, now_ms: int) -> None:
        self.log = [e for e in self.log if e[1].block_num > head.block_num]

    @staticmethod
    def verify_payload(header: BlockHeader, prev: Optional[BlockHeader]) -> tuple[bool, str]:
        try:
            rec = decode_payload(header)
        except ConsensusError as exc:
            return False, str(exc)
        if rec.get("alg") != RaftEngine.name:
            return False, f"payload algorithm {rec.get('alg')!r} is not raft"
        term = rec.get("term")
        if not isinstance(term, int) or term < 1:
            return False, f"invalid term {term!r}"
        if prev is not None:
            try:
                prev_rec = decode_payload(prev)
            except ConsensusError:
                prev_rec = {}
            if prev_rec.get("alg") == RaftEngine.name and term < prev_rec["term"]:
                return False, f"term {term} regressed below {prev_rec['term']}"
        return True, ""


def _block_term(block: Block) -> int:
    """Raft term recorded in a block's consensus payload, 0 for other engines."""
    try:
        rec = decode_payload(block.header)
    except ConsensusError:
        return 0
    if rec.get("alg") == RaftEngine.name and isinstance(rec.get("term"), int):
        return rec["term"]
    return 0
