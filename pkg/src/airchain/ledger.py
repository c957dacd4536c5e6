"""Transactions, batches and blocks: construction, ids and validation.

A transaction id is its header signature; a batch is the atomic unit of
commitment; a block id is the SHA-512 of the canonical block header
encoding.  All records go through the canonical codec so ids are stable
across processes and platforms.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from airchain.codec import CodecError, canonical_decode, canonical_encode, is_hex
from airchain.crypto import KeyPair, sha512_digest, sign, verify

GENESIS_PREVIOUS = "0" * 128


class LedgerError(ValueError):
    """Malformed ledger structures (building/parsing, not validation)."""


def _as_bytes(value) -> bytes:
    """Byte fields arrive as bytes in-process and as hex over the wire."""
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    return bytes.fromhex(value)


@dataclass(frozen=True)
class TransactionHeader:
    family_name: str
    family_version: str
    signer_public_key: str
    payload_sha512: str
    nonce: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "family_name": self.family_name,
            "family_version": self.family_version,
            "signer_public_key": self.signer_public_key,
            "payload_sha512": self.payload_sha512,
            "nonce": self.nonce,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TransactionHeader":
        try:
            return cls(
                family_name=rec["family_name"],
                family_version=rec["family_version"],
                signer_public_key=rec["signer_public_key"],
                payload_sha512=rec["payload_sha512"],
                nonce=rec["nonce"],
                inputs=tuple(rec["inputs"]),
                outputs=tuple(rec["outputs"]),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed transaction header: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_encode(self.to_record())


@dataclass(frozen=True)
class Transaction:
    header: TransactionHeader
    header_signature: str
    payload: bytes

    @property
    def id(self) -> str:
        return self.header_signature

    def to_record(self) -> dict:
        return {
            "header": self.header.to_record(),
            "header_signature": self.header_signature,
            "payload": self.payload,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        try:
            return cls(
                header=TransactionHeader.from_record(rec["header"]),
                header_signature=rec["header_signature"],
                payload=_as_bytes(rec["payload"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"malformed transaction: {exc}") from exc


@dataclass(frozen=True)
class BatchHeader:
    signer_public_key: str
    transaction_ids: tuple[str, ...]

    def to_record(self) -> dict:
        return {
            "signer_public_key": self.signer_public_key,
            "transaction_ids": list(self.transaction_ids),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BatchHeader":
        try:
            return cls(
                signer_public_key=rec["signer_public_key"],
                transaction_ids=tuple(rec["transaction_ids"]),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed batch header: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_encode(self.to_record())


@dataclass(frozen=True)
class Batch:
    header: BatchHeader
    header_signature: str
    transactions: tuple[Transaction, ...]

    @property
    def id(self) -> str:
        return self.header_signature

    def to_record(self) -> dict:
        return {
            "header": self.header.to_record(),
            "header_signature": self.header_signature,
            "transactions": [t.to_record() for t in self.transactions],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Batch":
        try:
            return cls(
                header=BatchHeader.from_record(rec["header"]),
                header_signature=rec["header_signature"],
                transactions=tuple(
                    Transaction.from_record(t) for t in rec["transactions"]
                ),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed batch: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_encode(self.to_record())

    @classmethod
    def decode(cls, data: bytes) -> "Batch":
        return cls.from_record(canonical_decode(data))


@dataclass(frozen=True)
class BlockHeader:
    block_num: int
    previous_block_id: str
    signer_public_key: str
    batch_ids: tuple[str, ...]
    state_root_hash: str
    consensus_payload: bytes = b""

    def to_record(self) -> dict:
        return {
            "block_num": self.block_num,
            "previous_block_id": self.previous_block_id,
            "signer_public_key": self.signer_public_key,
            "batch_ids": list(self.batch_ids),
            "state_root_hash": self.state_root_hash,
            "consensus_payload": self.consensus_payload,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BlockHeader":
        try:
            return cls(
                block_num=rec["block_num"],
                previous_block_id=rec["previous_block_id"],
                signer_public_key=rec["signer_public_key"],
                batch_ids=tuple(rec["batch_ids"]),
                state_root_hash=rec["state_root_hash"],
                consensus_payload=_as_bytes(rec["consensus_payload"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"malformed block header: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_encode(self.to_record())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    header_signature: str
    batches: tuple[Batch, ...]
    _id: str = field(default="", repr=False, compare=False)

    @property
    def id(self) -> str:
        if self._id:
            return self._id
        block_id = sha512_digest(self.header.encode())
        object.__setattr__(self, "_id", block_id)
        return block_id

    @property
    def block_num(self) -> int:
        return self.header.block_num

    def to_record(self) -> dict:
        return {
            "header": self.header.to_record(),
            "header_signature": self.header_signature,
            "batches": [b.to_record() for b in self.batches],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Block":
        try:
            return cls(
                header=BlockHeader.from_record(rec["header"]),
                header_signature=rec["header_signature"],
                batches=tuple(Batch.from_record(b) for b in rec["batches"]),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed block: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_encode(self.to_record())

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        return cls.from_record(canonical_decode(data))


def block_id(block: Block) -> str:
    """SHA-512 of the canonical block header encoding."""
    return sha512_digest(block.header.encode())


# --- builders ---


def new_nonce(rng=None) -> str:
    if rng is not None:
        return rng.getrandbits(128).to_bytes(16, "big").hex()
    return os.urandom(16).hex()


def build_transaction(
    payload: bytes,
    family: str,
    signer: KeyPair,
    *,
    family_version: str = "1.0",
    inputs: tuple[str, ...] = (),
    outputs: tuple[str, ...] = (),
    rng=None,
) -> Transaction:
    if not payload:
        raise LedgerError("payload must be nonempty")
    header = TransactionHeader(
        family_name=family,
        family_version=family_version,
        signer_public_key=signer.public_key,
        payload_sha512=sha512_digest(payload),
        nonce=new_nonce(rng),
        inputs=tuple(inputs),
        outputs=tuple(outputs),
    )
    return Transaction(
        header=header,
        header_signature=sign(header.encode(), signer),
        payload=payload,
    )


def build_batch(transactions, signer: KeyPair) -> Batch:
    txns = tuple(transactions)
    if not txns:
        raise LedgerError("batch needs at least one transaction")
    header = BatchHeader(
        signer_public_key=signer.public_key,
        transaction_ids=tuple(t.header_signature for t in txns),
    )
    return Batch(
        header=header,
        header_signature=sign(header.encode(), signer),
        transactions=txns,
    )


def build_block(
    block_num: int,
    previous_block_id: str,
    batches,
    state_root_hash: str,
    signer: KeyPair,
    consensus_payload: bytes = b"",
) -> Block:
    batches = tuple(batches)
    header = BlockHeader(
        block_num=block_num,
        previous_block_id=previous_block_id,
        signer_public_key=signer.public_key,
        batch_ids=tuple(b.header_signature for b in batches),
        state_root_hash=state_root_hash,
        consensus_payload=consensus_payload,
    )
    return Block(
        header=header,
        header_signature=sign(header.encode(), signer),
        batches=batches,
    )


# --- validation (violations are data, not exceptions) ---


def validate_transaction(txn: Transaction) -> list[str]:
    violations = []
    header = txn.header
    if sha512_digest(txn.payload) != header.payload_sha512:
        violations.append(f"transaction {txn.id[:16]}: payload digest mismatch")
    if not is_hex(header.nonce, 32):
        violations.append(f"transaction {txn.id[:16]}: malformed nonce")
    if not verify(header.encode(), txn.header_signature, header.signer_public_key):
        violations.append(f"transaction {txn.id[:16]}: header signature invalid")
    return violations


def validate_batch(batch: Batch) -> list[str]:
    """Check every signature, payload digest and the id listing.

    Returns the full list of violations (empty means ok) rather than
    stopping at the first problem.
    """
    violations = []
    listed = batch.header.transaction_ids
    actual = tuple(t.header_signature for t in batch.transactions)
    if listed != actual:
        violations.append(f"batch {batch.id[:16]}: transaction id list mismatch")
    for txn in batch.transactions:
        violations.extend(validate_transaction(txn))
    if not verify(
        batch.header.encode(), batch.header_signature, batch.header.signer_public_key
    ):
        violations.append(f"batch {batch.id[:16]}: header signature invalid")
    return violations


def validate_block_structure(block: Block) -> list[str]:
    """Structural checks only; state roots and consensus are the journal's job."""
    violations = []
    header = block.header
    if header.block_num < 0:
        violations.append("block_num negative")
    if not is_hex(header.previous_block_id, 128):
        violations.append("previous_block_id malformed")
    if not is_hex(header.state_root_hash, 128):
        violations.append("state_root_hash malformed")
    listed = header.batch_ids
    actual = tuple(b.header_signature for b in block.batches)
    if listed != actual:
        violations.append(f"block {block.id[:16]}: batch id list mismatch")
    if not verify(header.encode(), block.header_signature, header.signer_public_key):
        violations.append(f"block {block.id[:16]}: header signature invalid")
    for batch in block.batches:
        violations.extend(validate_batch(batch))
    return violations


def decode_batch_list(data: bytes) -> list[Batch]:
    """Parse the wire form of a batch list: {"batches": [...]}."""
    rec = canonical_decode(data)
    if "batches" not in rec or not isinstance(rec["batches"], list):
        raise CodecError("batch list must carry a 'batches' field")
    return [Batch.from_record(b) for b in rec["batches"]]


def encode_batch_list(batches) -> bytes:
    return canonical_encode({"batches": [b.to_record() for b in batches]})
