"""Off-chain API-key registry.

Keys exist purely to give the network a handle for tracking and removing
abusive submitters; there is no permission schema.  State is an
append-only event log (issue / revoke / flag records in canonical
encoding) replayed at startup, so the registry can always be audited
against its own history.  Single writer; revocation is permanent.
"""

from __future__ import annotations

import os
import secrets
import threading
from dataclasses import dataclass, field
from typing import Optional

from airchain.codec import canonical_decode, canonical_encode

ACTIVE = "active"
REVOKED = "revoked"
UNKNOWN = "unknown"


class RegistryError(Exception):
    pass


class UnknownKeyError(RegistryError):
    pass


@dataclass
class ApiKey:
    key: str
    status: str
    issued_at: int


@dataclass
class Account:
    account_id: str
    api_keys: list[ApiKey] = field(default_factory=list)
    flags: list[dict] = field(default_factory=list)


class Registry:
    def __init__(self, path: Optional[str] = None, clock=None):
        self._accounts: dict[str, Account] = {}
        self._keys: dict[str, tuple[str, ApiKey]] = {}  # key -> (account_id, entry)
        self._lock = threading.Lock()
        self._clock = clock if clock is not None else (lambda: 0)
        self._path = path
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                self._replay(path)
            self._fh = open(path, "a", encoding="utf-8")

    def _replay(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    event = canonical_decode(line.encode("utf-8"))
                except Exception:
                    continue  # torn tail line
                self._apply(event)

    def _append(self, event: dict) -> None:
        self._apply(event)
        if self._fh is not None:
            self._fh.write(canonical_encode(event).decode("utf-8") + "\n")
            self._fh.flush()

    def _apply(self, event: dict) -> None:
        kind = event.get("event")
        if kind == "issue":
            account = self._accounts.setdefault(
                event["account_id"], Account(event["account_id"])
            )
            entry = ApiKey(key=event["key"], status=ACTIVE, issued_at=event["at"])
            account.api_keys.append(entry)
            self._keys[entry.key] = (account.account_id, entry)
        elif kind == "revoke":
            found = self._keys.get(event["key"])
            if found is not None:
                found[1].status = REVOKED
        elif kind == "flag":
            account = self._accounts.setdefault(
                event["account_id"], Account(event["account_id"])
            )
            account.flags.append(
                {k: event[k] for k in ("reason", "z_score_milli", "at") if k in event}
            )

    # --- operations ---

    def issue_key(self, account_id: str) -> str:
        """Issue a fresh random key for the account (auto-created)."""
        with self._lock:
            while True:
                key = secrets.token_hex(32)
                if key not in self._keys:
                    break
            self._append(
                {"event": "issue", "account_id": account_id, "key": key,
                 "at": int(self._clock())}
            )
            return key

    def revoke_key(self, key: str) -> None:
        """Permanently revoke; idempotent for known keys."""
        with self._lock:
            if key not in self._keys:
                raise UnknownKeyError(f"key {key[:8]}… was never issued")
            if self._keys[key][1].status == REVOKED:
                return
            self._append({"event": "revoke", "key": key, "at": int(self._clock())})

    def check_key(self, key: str) -> str:
        found = self._keys.get(key)
        if found is None:
            return UNKNOWN
        return found[1].status

    def flag_account(self, account_id: str, reason: str, z_score: Optional[float] = None) -> None:
        """Record an anomaly flag (e.g., from a win-rate z-test)."""
        with self._lock:
            event = {
                "event": "flag",
                "account_id": account_id,
                "reason": reason,
                "at": int(self._clock()),
            }
            if z_score is not None:
                event["z_score_milli"] = int(round(z_score * 1000))
            self._append(event)

    def account(self, account_id: str) -> Optional[Account]:
        return self._accounts.get(account_id)

    def accounts(self) -> list[Account]:
        return list(self._accounts.values())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
