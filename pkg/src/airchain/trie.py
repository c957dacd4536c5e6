"""Persistent Merkle-radix state trie.

Addresses are 70 lowercase hex characters (6-hex namespace prefix plus
64-hex location) and the trie branches on hex nibbles, so every address
is a 70-level path.  Nodes are immutable and content-addressed: digest =
SHA-512 of the canonical node encoding, updates rebuild the path to a
new root, and any historical root stays readable.  The empty trie root
is the SHA-512 of zero-length input.

Node encoding: {"c": {nibble: child digest}, "v": value hex} — short
field names keep the per-update hash input small.
"""

from __future__ import annotations

import hashlib
import os
from typing import Iterator, Optional

from airchain.codec import canonical_decode, canonical_encode

ADDRESS_LENGTH = 70
EMPTY_ROOT = hashlib.sha512(b"").hexdigest()

AIR_NAMESPACE = "616972"  # hex of ascii "air"
SETTINGS_NAMESPACE = "000000"
REGISTRY_NAMESPACE = "726567"  # hex of ascii "reg"

_HEX = set("0123456789abcdef")


class TrieError(ValueError):
    """Malformed addresses, proofs, or missing store nodes."""


def check_address(address: str) -> str:
    if len(address) != ADDRESS_LENGTH or not set(address) <= _HEX:
        raise TrieError(f"malformed address {address!r}")
    return address


class NodeStore:
    """Content-addressed node storage with an optional append-only file.

    The file holds one "<digest> <encoding>" line per node; digests are
    the lookup keys, so replaying the file reconstructs the full store
    (duplicates are harmless).
    """

    def __init__(self, path: Optional[str] = None):
        self._nodes: dict[str, dict] = {}
        self._path = path
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                self._load(path)
            self._fh = open(path, "a", encoding="utf-8")

    def _load(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    digest, encoded = line.split(" ", 1)
                    self._nodes[digest] = canonical_decode(encoded.encode("utf-8"))
                except Exception:
                    # torn tail write from a crash; everything before it is intact
                    continue

    def get(self, digest: str) -> dict:
        try:
            return self._nodes[digest]
        except KeyError:
            raise TrieError(f"missing trie node {digest[:16]}") from None

    def put(self, record: dict) -> str:
        encoded = canonical_encode(record)
        digest = hashlib.sha512(encoded).hexdigest()
        if digest not in self._nodes:
            self._nodes[digest] = record
            if self._fh is not None:
                self._fh.write(digest + " " + encoded.decode("utf-8") + "\n")
        return digest

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __contains__(self, digest: str) -> bool:
        return digest in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)


def _encode_node(record: dict) -> bytes:
    return canonical_encode(record)


def _node_digest(record: dict) -> str:
    return hashlib.sha512(canonical_encode(record)).hexdigest()


class StateTrie:
    """Pure-functional view over a NodeStore: every write returns a new root."""

    def __init__(self, store: Optional[NodeStore] = None):
        self.store = store if store is not None else NodeStore()

    def get(self, root: str, address: str) -> Optional[bytes]:
        check_address(address)
        if root == EMPTY_ROOT:
            return None
        record = self.store.get(root)
        for nibble in address:
            children = record["c"]
            if nibble not in children:
                return None
            record = self.store.get(children[nibble])
        value = record.get("v")
        return bytes.fromhex(value) if value is not None else None

    def set(self, root: str, address: str, value: bytes) -> str:
        check_address(address)
        path = self._read_path(root, address)
        leaf = dict(path[-1]) if path[-1] is not None else {"c": {}}
        leaf["v"] = value.hex()
        return self._write_path(path, address, leaf)

    def delete(self, root: str, address: str) -> str:
        check_address(address)
        path = self._read_path(root, address)
        if path[-1] is None or "v" not in path[-1]:
            return root  # absent: no-op
        leaf = dict(path[-1])
        del leaf["v"]
        return self._write_path(path, address, leaf if leaf["c"] else None)

    def _read_path(self, root: str, address: str) -> list[Optional[dict]]:
        """Nodes along the address, index 0 = root node, None once absent."""
        path: list[Optional[dict]] = []
        record = self.store.get(root) if root != EMPTY_ROOT else None
        path.append(record)
        for nibble in address:
            if record is None:
                path.append(None)
                continue
            children = record["c"]
            record = self.store.get(children[nibble]) if nibble in children else None
            path.append(record)
        return path

    def _write_path(
        self, path: list[Optional[dict]], address: str, leaf: Optional[dict]
    ) -> str:
        """Rebuild the path bottom-up; a None node prunes itself from its parent."""
        child_digest = self.store.put(leaf) if leaf is not None else None
        for depth in range(ADDRESS_LENGTH - 1, -1, -1):
            node = path[depth]
            record = {"c": dict(node["c"])} if node is not None else {"c": {}}
            if node is not None and "v" in node:
                record["v"] = node["v"]
            nibble = address[depth]
            if child_digest is None:
                record["c"].pop(nibble, None)
            else:
                record["c"][nibble] = child_digest
            if not record["c"] and "v" not in record:
                child_digest = None  # empty interior node: prune
            else:
                child_digest = self.store.put(record)
        return child_digest if child_digest is not None else EMPTY_ROOT

    def items(self, root: str, prefix: str = "") -> Iterator[tuple[str, bytes]]:
        """All (address, value) pairs under root whose address starts with prefix."""
        if root == EMPTY_ROOT:
            return
        record = self.store.get(root)
        for nibble in prefix:
            children = record["c"]
            if nibble not in children:
                return
            record = self.store.get(children[nibble])
        yield from self._walk(record, prefix)

    def _walk(self, record: dict, path: str) -> Iterator[tuple[str, bytes]]:
        if len(path) == ADDRESS_LENGTH:
            value = record.get("v")
            if value is not None:
                yield path, bytes.fromhex(value)
            return
        for nibble in sorted(record["c"]):
            yield from self._walk(self.store.get(record["c"][nibble]), path + nibble)

    # --- Merkle proofs ---

    def prove(self, root: str, address: str) -> list[bytes]:
        """Node encodings from the root toward the address (stops where absent)."""
        check_address(address)
        if root == EMPTY_ROOT:
            return []
        record = self.store.get(root)
        proof = [_encode_node(record)]
        for nibble in address:
            children = record["c"]
            if nibble not in children:
                break
            record = self.store.get(children[nibble])
            proof.append(_encode_node(record))
        return proof


def verify_proof(
    root: str, address: str, value: Optional[bytes], proof: list[bytes]
) -> bool:
    """Check a membership (value is bytes) or absence (value is None) proof."""
    try:
        check_address(address)
    except TrieError:
        return False
    if root == EMPTY_ROOT:
        return value is None and not proof
    if not proof:
        return False
    try:
        records = [canonical_decode(p) for p in proof]
    except Exception:
        return False
    if hashlib.sha512(proof[0]).hexdigest() != root:
        return False
    record = records[0]
    index = 0
    for nibble in address:
        children = record.get("c")
        if not isinstance(children, dict):
            return False
        if nibble not in children:
            # path ends early: valid only as an absence proof
            return value is None and index == len(proof) - 1
        index += 1
        if index >= len(proof):
            return False
        if hashlib.sha512(proof[index]).hexdigest() != children[nibble]:
            return False
        record = records[index]
    if index != len(proof) - 1:
        return False
    stored = record.get("v")
    if value is None:
        return stored is None
    return stored == value.hex()
