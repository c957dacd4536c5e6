"""Validator journal: the pipeline that turns submitted batches into a chain.

The completer routes incoming items (blocks with a known predecessor go
to the chain controller, batches to the block publisher, blocks with a
missing predecessor wait in the pending queue); the chain controller
re-executes every candidate block and resolves forks; the block
publisher builds candidate blocks from pending batches when the active
consensus engine grants leadership.  The whole pipeline is single-writer:
network and API threads only enqueue.
"""

from __future__ import annotations

import logging
import os
from collections import OrderedDict
from typing import Callable, Optional

from airchain import ledger
from airchain.ledger import Batch, Block, GENESIS_PREVIOUS
from airchain.settings import SettingsHandler
from airchain.trie import EMPTY_ROOT, StateTrie
from airchain.txfamily import AirQualityHandler, InvalidTransaction

logger = logging.getLogger(__name__)

CACHE_RETENTION_DEPTH = 100


def default_handlers() -> dict:
    handlers = {}
    for handler in (AirQualityHandler(), SettingsHandler()):
        handlers[handler.family_name] = handler
    return handlers


class ExecutionContext:
    """Isolated state view for one batch: reads see the overlay first."""

    def __init__(self, trie: StateTrie, base_root: str, clock_s: int):
        self._trie = trie
        self._base_root = base_root
        self._overlay: dict[str, Optional[bytes]] = {}
        self.clock_s = clock_s

    def get(self, address: str) -> Optional[bytes]:
        if address in self._overlay:
            return self._overlay[address]
        return self._trie.get(self._base_root, address)

    def stage(self, writes) -> None:
        for address, value in writes:
            self._overlay[address] = value

    def commit(self) -> str:
        root = self._base_root
        for address, value in self._overlay.items():
            if value is None:
                root = self._trie.delete(root, address)
            else:
                root = self._trie.set(root, address, value)
        return root


class Executor:
    """Applies batches to the state trie through family handlers, atomically."""

    def __init__(self, trie: StateTrie, handlers: Optional[dict] = None):
        self.trie = trie
        self.handlers = handlers if handlers is not None else default_handlers()

    def execute_batch(self, root: str, batch: Batch, clock_s: int) -> tuple[str, list[str]]:
        """Returns (new root, violations); violations nonempty means the
        batch failed as a unit and the root is unchanged."""
        context = ExecutionContext(self.trie, root, clock_s)
        for txn in batch.transactions:
            handler = self.handlers.get(txn.header.family_name)
            if handler is None:
                return root, [
                    f"transaction {txn.id[:16]}: unknown family "
                    f"{txn.header.family_name!r}"
                ]
            try:
                writes = handler.apply(txn, context)
            except InvalidTransaction as exc:
                return root, [f"transaction {txn.id[:16]}: {v}" for v in exc.violations]
            context.stage(writes)
        return context.commit(), []

    def execute_batches(self, root: str, batches, clock_s: int):
        """Apply batches in order; returns (final root, list of per-batch violations)."""
        results = []
        for batch in batches:
            root, violations = self.execute_batch(root, batch, clock_s)
            results.append(violations)
        return root, results


class BlockStore:
    """Durable block map plus chain-head pointer and block-num index.

    On disk: an append-only file of canonical block encodings and a
    sidecar head file updated atomically, so a crash can lose at most an
    uncommitted tail line, never the committed head.
    """

    def __init__(self, directory: Optional[str] = None):
        self._blocks: dict[str, Block] = {}
        self._main_chain: dict[int, str] = {}
        self._head_id: Optional[str] = None
        self._dir = directory
        self._fh = None
        if directory is not None:
            os.makedirs(directory, exist_ok=True)
            self._blocks_path = os.path.join(directory, "blocks.dat")
            self._head_path = os.path.join(directory, "head")
            self._load()
            self._fh = open(self._blocks_path, "a", encoding="utf-8")

    def _load(self) -> None:
        if os.path.exists(self._blocks_path):
            with open(self._blocks_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        block = Block.decode(line.encode("utf-8"))
                    except Exception:
                        logger.warning("dropping torn block-store line")
                        continue
                    self._blocks[block.id] = block
        if os.path.exists(self._head_path):
            with open(self._head_path, "r", encoding="utf-8") as fh:
                head_id = fh.read().strip()
            if head_id and head_id in self._blocks:
                self._set_head_loaded(head_id)

    def _set_head_loaded(self, head_id: str) -> None:
        self._head_id = head_id
        self._main_chain = {}
        cursor = self._blocks[head_id]
        while True:
            self._main_chain[cursor.block_num] = cursor.id
            if cursor.header.previous_block_id == GENESIS_PREVIOUS:
                break
            cursor = self._blocks[cursor.header.previous_block_id]

    def put(self, block: Block) -> None:
        if block.id in self._blocks:
            return
        self._blocks[block.id] = block
        if self._fh is not None:
            self._fh.write(block.encode().decode("utf-8") + "\n")
            self._fh.flush()

    def get(self, block_id: str) -> Optional[Block]:
        return self._blocks.get(block_id)

    def __contains__(self, block_id: str) -> bool:
        return block_id in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def head(self) -> Optional[Block]:
        return self._blocks.get(self._head_id) if self._head_id else None

    def set_head(self, block_id: str) -> None:
        if block_id not in self._blocks:
            raise KeyError(f"unknown block {block_id[:16]}")
        self._head_id = block_id
        cursor = self._blocks[block_id]
        while True:
            if self._main_chain.get(cursor.block_num) == cursor.id:
                break
            self._main_chain[cursor.block_num] = cursor.id
            if cursor.header.previous_block_id == GENESIS_PREVIOUS:
                break
            cursor = self._blocks[cursor.header.previous_block_id]
        # drop any stale index entries above the new head
        head_num = self._blocks[block_id].block_num
        for stale in [n for n in self._main_chain if n > head_num]:
            del self._main_chain[stale]
        if self._dir is not None:
            tmp = self._head_path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(block_id + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self._head_path)

    def block_by_num(self, block_num: int) -> Optional[Block]:
        block_id = self._main_chain.get(block_num)
        return self._blocks.get(block_id) if block_id else None

    def chain(self, limit: Optional[int] = None, start: Optional[str] = None):
        """Main-chain blocks, head first."""
        cursor = self._blocks.get(start) if start else self.head
        count = 0
        while cursor is not None:
            if limit is not None and count >= limit:
                return
            yield cursor
            count += 1
            prev = cursor.header.previous_block_id
            cursor = self._blocks.get(prev) if prev != GENESIS_PREVIOUS else None

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._fh = None


class BlockCache:
    """Bounded map of blocks in flight; pruned against the committed head."""

    def __init__(self, depth: int = CACHE_RETENTION_DEPTH):
        self.depth = depth
        self._blocks: OrderedDict[str, Block] = OrderedDict()

    def put(self, block: Block) -> None:
        self._blocks[block.id] = block
        self._blocks.move_to_end(block.id)

    def get(self, block_id: str) -> Optional[Block]:
        return self._blocks.get(block_id)

    def __contains__(self, block_id: str) -> bool:
        return block_id in self._blocks

    def prune(self, head_num: int) -> None:
        floor = head_num - self.depth
        for block_id in [b for b, blk in self._blocks.items() if blk.block_num < floor]:
            del self._blocks[block_id]


class PendingQueue:
    """Batches awaiting publication and blocks awaiting their predecessor."""

    def __init__(self):
        self.batches: OrderedDict[str, Batch] = OrderedDict()
        self.orphans: dict[str, list[Block]] = {}

    def add_batch(self, batch: Batch) -> bool:
        if batch.id in self.batches:
            return False
        self.batches[batch.id] = batch
        return True

    def remove_batches(self, batch_ids) -> None:
        for batch_id in batch_ids:
            self.batches.pop(batch_id, None)

    def park_block(self, block: Block) -> None:
        self.orphans.setdefault(block.header.previous_block_id, []).append(block)

    def release_blocks(self, block_id: str) -> list[Block]:
        return self.orphans.pop(block_id, [])

    def has_block(self, block_id: str) -> bool:
        return any(b.id == block_id for blocks in self.orphans.values() for b in blocks)


def resolve_fork(head_a: Block, head_b: Block, preference=None) -> Block:
    """Deterministic total order between two candidate heads.

    Greater block_num wins; ties defer to the consensus engine's
    preference; a remaining tie picks the lexicographically smaller
    block id.  Symmetric by construction.
    """
    if head_a.block_num != head_b.block_num:
        return head_a if head_a.block_num > head_b.block_num else head_b
    if preference is not None:
        chosen = preference(head_a, head_b)
        if chosen is not None:
            return chosen
    return head_a if head_a.id <= head_b.id else head_b


class Journal:
    """Single-writer pipeline: completer -> chain controller / block publisher."""

    def __init__(
        self,
        store: BlockStore,
        trie: StateTrie,
        signer,
        clock: Callable[[], int],
        executor: Optional[Executor] = None,
    ):
        self.store = store
        self.cache = BlockCache()
        self.pending = PendingQueue()
        self.trie = trie
        self.executor = executor if executor is not None else Executor(trie)
        self.signer = signer
        self.clock = clock
        # consensus glue, wired by the node: verify a block's consensus
        # payload and break fork ties
        self.consensus_verifier: Optional[Callable[[Block, Block], tuple[bool, str]]] = None
        self.fork_preference = None
        self.on_commit: list[Callable[[Block], None]] = []
        self.committed_batch_ids: set[str] = set()
        self.rejected_block_ids: set[str] = set()
        # blocks that already went through the chain controller; the store
        # also holds unconsidered candidates from the publisher
        self.considered_block_ids: set[str] = set()
        if self.store.head is not None:
            for block in self.store.chain():
                self.committed_batch_ids.update(block.header.batch_ids)
                self.considered_block_ids.add(block.id)

    # --- completer ---

    def completer_submit(self, item) -> tuple[str, list[str]]:
        """Route an incoming block or batch; returns (status, reasons)."""
        if isinstance(item, Batch):
            return self._submit_batch(item)
        if isinstance(item, Block):
            return self._submit_block(item)
        return "rejected", [f"unsupported item type {type(item).__name__}"]

    def _submit_batch(self, batch: Batch) -> tuple[str, list[str]]:
        if batch.id in self.committed_batch_ids or batch.id in self.pending.batches:
            return "duplicate", []
        violations = ledger.validate_batch(batch)
        if violations:
            return "rejected", violations
        self.pending.add_batch(batch)
        return "routed", []

    def _submit_block(self, block: Block) -> tuple[str, list[str]]:
        if block.id in self.considered_block_ids or block.id in self.rejected_block_ids:
            return "duplicate", []
        if self.pending.has_block(block.id):
            return "duplicate", []
        violations = ledger.validate_block_structure(block)
        if violations:
            return "rejected", violations
        previous = block.header.previous_block_id
        if previous != GENESIS_PREVIOUS and previous not in self.considered_block_ids:
            self.pending.park_block(block)
            return "pending", []
        status, reasons = self.chain_controller_consider(block)
        if status == "rejected":
            return "rejected", reasons
        return "routed", []

    # --- chain controller ---

    def chain_controller_consider(self, block: Block) -> tuple[str, list[str]]:
        """Validate a completed block against its predecessor and place it."""
        header = block.header
        if header.previous_block_id == GENESIS_PREVIOUS:
            if header.block_num != 0:
                return self._reject(block, ["genesis block must have block_num 0"])
            prev = None
            prev_root = EMPTY_ROOT
        else:
            prev = self.store.get(header.previous_block_id)
            if prev is None:
                return "rejected", ["predecessor unknown"]
            if header.block_num != prev.block_num + 1:
                return self._reject(
                    block,
                    [f"block_num {header.block_num} does not follow {prev.block_num}"],
                )
            prev_root = prev.header.state_root_hash

        if self.consensus_verifier is not None:
            ok, reason = self.consensus_verifier(block, prev)
            if not ok:
                return self._reject(block, [f"consensus verification failed: {reason}"])

        root, batch_results = self.executor.execute_batches(
            prev_root, block.batches, self.clock()
        )
        failed = [v for v in batch_results if v]
        if failed:
            return self._reject(block, [v for vs in failed for v in vs])
        if root != header.state_root_hash:
            return self._reject(
                block,
                [f"state root mismatch: computed {root[:16]}, header "
                 f"{header.state_root_hash[:16]}"],
            )

        self.store.put(block)
        self.cache.put(block)
        self.considered_block_ids.add(block.id)
        head = self.store.head
        if head is None or block.header.previous_block_id == head.id:
            self._advance_head(block)
            status = "extended"
        else:
            winner = resolve_fork(head, block, self.fork_preference)
            if winner.id == block.id:
                self._switch_head(head, block)
                status = "fork-switched"
            else:
                status = "stored-side-chain"
        self._release_orphans(block.id)
        return status, []

    def _reject(self, block: Block, reasons: list[str]) -> tuple[str, list[str]]:
        self.rejected_block_ids.add(block.id)
        logger.info("rejected block %s: %s", block.id[:16], "; ".join(reasons))
        return "rejected", reasons

    def _advance_head(self, block: Block) -> None:
        self.store.set_head(block.id)
        self.committed_batch_ids.update(block.header.batch_ids)
        self.pending.remove_batches(block.header.batch_ids)
        self.cache.prune(block.block_num)
        for callback in self.on_commit:
            callback(block)

    def _switch_head(self, old_head: Block, new_head: Block) -> None:
        """Move the head across a fork, requeueing abandoned batches."""
        old_branch, new_branch = self._fork_branches(old_head, new_head)
        new_ids = {bid for blk in new_branch for bid in blk.header.batch_ids}
        for blk in old_branch:
            for batch in blk.batches:
                self.committed_batch_ids.discard(batch.id)
                if batch.id not in new_ids:
                    self.pending.add_batch(batch)
        self.store.set_head(new_head.id)
        for blk in reversed(new_branch):  # oldest first
            self.committed_batch_ids.update(blk.header.batch_ids)
            self.pending.remove_batches(blk.header.batch_ids)
            for callback in self.on_commit:
                callback(blk)
        self.cache.prune(new_head.block_num)

    def _fork_branches(self, head_a: Block, head_b: Block):
        """Blocks exclusive to each branch back to the common ancestor."""
        branch_a, branch_b = [], []
        a, b = head_a, head_b
        while a.block_num > b.block_num:
            branch_a.append(a)
            a = self.store.get(a.header.previous_block_id)
        while b.block_num > a.block_num:
            branch_b.append(b)
            b = self.store.get(b.header.previous_block_id)
        while a.id != b.id:
            branch_a.append(a)
            branch_b.append(b)
            if a.header.previous_block_id == GENESIS_PREVIOUS:
                break
            a = self.store.get(a.header.previous_block_id)
            b = self.store.get(b.header.previous_block_id)
        return branch_a, branch_b

    def _release_orphans(self, block_id: str) -> None:
        for orphan in self.pending.release_blocks(block_id):
            status, _ = self.chain_controller_consider(orphan)
            if status != "rejected":
                self._release_orphans(orphan.id)

    # --- block publisher ---

    def publish_block(self, engine, now_ms: Optional[int] = None) -> Optional[Block]:
        """Build a candidate block when the engine grants leadership.

        Returns the signed candidate (also placed in cache and store) or
        None when not leader or nothing valid is pending.
        """
        head = self.store.head
        payload = engine.may_publish(now_ms)
        if payload is None:
            return None
        if not self.pending.batches:
            return None
        clock_s = self.clock()
        base_root = head.header.state_root_hash if head else EMPTY_ROOT
        root = base_root
        included, excluded = [], []
        for batch in list(self.pending.batches.values()):
            structural = ledger.validate_batch(batch)
            if structural:
                excluded.append((batch.id, structural))
                continue
            new_root, violations = self.executor.execute_batch(root, batch, clock_s)
            if violations:
                excluded.append((batch.id, violations))
                continue
            root = new_root
            included.append(batch)
        for batch_id, violations in excluded:
            logger.info("excluding batch %s: %s", batch_id[:16], violations)
            self.pending.batches.pop(batch_id, None)
        if not included:
            return None
        block = ledger.build_block(
            block_num=(head.block_num + 1) if head else 0,
            previous_block_id=head.id if head else GENESIS_PREVIOUS,
            batches=included,
            state_root_hash=root,
            signer=self.signer,
            consensus_payload=payload,
        )
        self.cache.put(block)
        self.store.put(block)
        return block

    # --- genesis ---

    def commit_genesis(self, block: Block) -> tuple[str, list[str]]:
        if self.store.head is not None:
            existing = self.store.block_by_num(0)
            if existing is not None and existing.id == block.id:
                return "duplicate", []
            return "rejected", ["store already has a different genesis"]
        return self.chain_controller_consider(block)
