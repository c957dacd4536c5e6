"""Canonical record encoding shared by every signed or hashed structure.

Signatures, payload digests, node digests and the block store file all
depend on two implementations producing the same bytes for the same
record, so the encoding is deliberately small: UTF-8 text maps with keys
sorted lexicographically, no whitespace, integers in decimal, byte fields
rendered as lowercase hex strings.  Floats, booleans and null are not
representable; consensus-critical quantities are stored as scaled
integers instead.
"""

from __future__ import annotations

import json
from typing import Any

Record = dict


class CodecError(ValueError):
    """Raised for records outside the canonical domain or malformed bytes."""


def _normalize(value: Any, path: str) -> Any:
    if isinstance(value, bool):
        raise CodecError(f"unsupported value kind bool at {path}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return value
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, (list, tuple)):
        return [_normalize(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        out = {}
        for key, v in value.items():
            if not isinstance(key, str):
                raise CodecError(f"non-string key {key!r} at {path}")
            out[key] = _normalize(v, f"{path}.{key}")
        return out
    raise CodecError(f"unsupported value kind {type(value).__name__} at {path}")


def canonical_encode(record: dict) -> bytes:
    """Encode a record to its unique canonical byte form."""
    if not isinstance(record, dict):
        raise CodecError("top-level value must be a record")
    normalized = _normalize(record, "$")
    return json.dumps(
        normalized, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def _reject_float(_: str) -> Any:
    raise CodecError("fractional numbers are not canonical")


def _reject_constant(name: str) -> Any:
    raise CodecError(f"non-finite constant {name} is not canonical")


def _check_decoded(value: Any, path: str) -> Any:
    if isinstance(value, bool) or value is None:
        raise CodecError(f"unsupported value kind at {path}")
    if isinstance(value, (int, str)):
        return value
    if isinstance(value, list):
        return [_check_decoded(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        return {k: _check_decoded(v, f"{path}.{k}") for k, v in value.items()}
    raise CodecError(f"unsupported value kind {type(value).__name__} at {path}")


def canonical_decode(data: bytes) -> dict:
    """Decode canonical bytes back to a record.

    Byte fields come back as their hex string rendering; the round trip
    law is encode(decode(encode(r))) == encode(r).
    """
    try:
        value = json.loads(
            data.decode("utf-8"),
            parse_float=_reject_float,
            parse_constant=_reject_constant,
        )
    except CodecError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"malformed canonical bytes: {exc}") from exc
    if not isinstance(value, dict):
        raise CodecError("top-level value must be a record")
    return _check_decoded(value, "$")


def is_hex(text: str, length: int | None = None) -> bool:
    """True iff text is lowercase hex, optionally of an exact length."""
    if length is not None and len(text) != length:
        return False
    if len(text) % 2:
        return False
    return all(c in "0123456789abcdef" for c in text)
