"""On-chain settings family.

Settings are key/value strings stored under the "000000" namespace; the
one the network actually steers by is "consensus.algorithm", whose value
must name a known engine.  A setting committed in block k governs the
chain from block k+1 on.
"""

from __future__ import annotations

import hashlib
from typing import Optional

from airchain.codec import CodecError, canonical_decode, canonical_encode
from airchain.trie import SETTINGS_NAMESPACE
from airchain.txfamily import InvalidTransaction

FAMILY_NAME = "settings"
FAMILY_VERSION = "1.0"

CONSENSUS_KEY = "consensus.algorithm"
KNOWN_ALGORITHMS = ("pbft", "poet_cft", "raft")


def setting_address(key: str) -> str:
    return SETTINGS_NAMESPACE + hashlib.sha512(key.encode("utf-8")).hexdigest()[:64]


def encode_setting(key: str, value: str) -> bytes:
    return canonical_encode({"key": key, "value": value})


def decode_setting(data: bytes) -> tuple[str, str]:
    rec = canonical_decode(data)
    try:
        key, value = rec["key"], rec["value"]
    except KeyError as exc:
        raise CodecError(f"setting payload missing field: {exc}") from exc
    if not isinstance(key, str) or not isinstance(value, str):
        raise CodecError("setting key and value must be strings")
    return key, value


class SettingsHandler:
    family_name = FAMILY_NAME
    family_versions = (FAMILY_VERSION,)

    def apply(self, txn, context) -> list[tuple[str, Optional[bytes]]]:
        try:
            key, value = decode_setting(txn.payload)
        except CodecError as exc:
            raise InvalidTransaction([f"payload codec error: {exc}"]) from exc
        if not key:
            raise InvalidTransaction(["setting key must be nonempty"])
        if key == CONSENSUS_KEY and value not in KNOWN_ALGORITHMS:
            raise InvalidTransaction(
                [f"unknown consensus algorithm {value!r}; known: "
                 + ", ".join(KNOWN_ALGORITHMS)]
            )
        return [(setting_address(key), encode_setting(key, value))]


def get_setting(trie, state_root: str, key: str) -> Optional[str]:
    """Read a setting value at a given state root, or None when unset."""
    raw = trie.get(state_root, setting_address(key))
    if raw is None:
        return None
    _, value = decode_setting(raw)
    return value
