"""REST boundary of a validator node.

Handlers are pure functions over a node view so the simulator can call
them in-process and the HTTP layer stays a thin adapter.  Bodies and
responses use the canonical encoding's text form (compact JSON, sorted
keys, binary fields as lowercase hex).  Submission is asynchronous:
"accepted" means the batch passed the key gate and structural validation
and entered the pending queue, not that it is committed.

Status vocabulary -> HTTP: accepted 202, invalid 400, unauthorized 401,
not-found 404, bad-request 400.
"""

from __future__ import annotations

import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Protocol
from urllib.parse import parse_qsl, urlsplit

from airchain import ledger, registry as registry_mod
from airchain.codec import CodecError, canonical_encode
from airchain.trie import AIR_NAMESPACE, ADDRESS_LENGTH, StateTrie, TrieError
from airchain.txfamily import SourceFlag, decode_reading

logger = logging.getLogger(__name__)

DEFAULT_API_PORT = 8008
DEFAULT_INTERNAL_PORT = 4004
DEFAULT_CONSENSUS_PORT = 5050

API_KEY_HEADER = "X-Api-Key"

HTTP_STATUS = {
    "accepted": 202,
    "ok": 200,
    "invalid": 400,
    "unauthorized": 401,
    "not-found": 404,
    "bad-request": 400,
}


class NodeView(Protocol):
    """What the API needs from a running node."""

    registry: registry_mod.Registry
    trie: StateTrie

    def submit_batch(self, batch: ledger.Batch) -> tuple[str, list[str]]: ...

    def head(self) -> Optional[ledger.Block]: ...

    def get_block(self, block_id: str) -> Optional[ledger.Block]: ...

    def chain_page(self, limit: int, start: Optional[str]) -> list[ledger.Block]: ...

    def peers_record(self) -> dict: ...

    def status_record(self) -> dict: ...


def _block_summary(block: ledger.Block) -> dict:
    return {
        "block_id": block.id,
        "block_num": block.block_num,
        "previous_block_id": block.header.previous_block_id,
        "signer_public_key": block.header.signer_public_key,
        "batch_count": len(block.batches),
        "state_root_hash": block.header.state_root_hash,
    }


def handle_submit_batches(node: NodeView, body: bytes, api_key: Optional[str]) -> tuple[str, dict]:
    """POST /batches: key gate, structural validation, enqueue."""
    key_status = node.registry.check_key(api_key) if api_key else registry_mod.UNKNOWN
    if key_status != registry_mod.ACTIVE:
        return "unauthorized", {
            "error": f"api key {key_status}",
            "receipts": [],
        }
    try:
        batches = ledger.decode_batch_list(body)
    except (CodecError, ledger.LedgerError) as exc:
        return "invalid", {"error": str(exc), "receipts": []}
    if not batches:
        return "invalid", {"error": "no batches in submission", "receipts": []}
    receipts = []
    worst = "accepted"
    for batch in batches:
        status, violations = node.submit_batch(batch)
        if status in ("routed", "duplicate"):
            receipts.append({"batch_id": batch.id, "status": "accepted"})
        else:
            worst = "invalid"
            receipts.append(
                {"batch_id": batch.id, "status": "invalid", "violations": violations}
            )
    return worst, {"receipts": receipts}


def handle_query(node: NodeView, path: str, params: dict) -> tuple[str, dict]:
    """GET router for the read-only views."""
    try:
        if path == "/blocks":
            return _query_blocks(node, params)
        match = re.fullmatch(r"/blocks/([0-9a-f]+)", path)
        if match:
            block = node.get_block(match.group(1))
            if block is None:
                return "not-found", {"error": "unknown block id"}
            return "ok", {"block": block.to_record()}
        match = re.fullmatch(r"/state/([0-9a-fA-F]*)", path)
        if match:
            return _query_state(node, match.group(1))
        if path == "/readings":
            return _query_readings(node, params)
        if path == "/peers":
            return "ok", node.peers_record()
        if path == "/status":
            return "ok", node.status_record()
        if path == "/accounts":
            return "ok", _accounts_record(node)
        return "not-found", {"error": f"unknown path {path}"}
    except ValueError as exc:
        return "bad-request", {"error": str(exc)}


def _query_blocks(node: NodeView, params: dict) -> tuple[str, dict]:
    limit = _int_param(params, "limit", 100)
    if limit < 1:
        raise ValueError("limit must be positive")
    start = params.get("start")
    blocks = node.chain_page(limit, start)
    if start is not None and not blocks:
        return "not-found", {"error": "unknown start block"}
    head = node.head()
    return "ok", {
        "head_id": head.id if head else "",
        "blocks": [_block_summary(b) for b in blocks],
    }


def _query_state(node: NodeView, address: str) -> tuple[str, dict]:
    if len(address) != ADDRESS_LENGTH or address != address.lower():
        return "bad-request", {"error": f"address must be {ADDRESS_LENGTH} lowercase hex chars"}
    head = node.head()
    if head is None:
        return "not-found", {"error": "empty chain"}
    try:
        value = node.trie.get(head.header.state_root_hash, address)
    except TrieError as exc:
        return "bad-request", {"error": str(exc)}
    if value is None:
        return "not-found", {"error": "address unset"}
    return "ok", {"address": address, "value": value}


def _query_readings(node: NodeView, params: dict) -> tuple[str, dict]:
    head = node.head()
    if head is None:
        return "ok", {"readings": []}
    min_lat = _int_param(params, "min_lat_udeg", -90_000_000)
    max_lat = _int_param(params, "max_lat_udeg", 90_000_000)
    min_lon = _int_param(params, "min_lon_udeg", -180_000_000)
    max_lon = _int_param(params, "max_lon_udeg", 180_000_000)
    from_s = _int_param(params, "from_s", None)
    to_s = _int_param(params, "to_s", None)
    source = params.get("source")
    if source is not None:
        try:
            SourceFlag(source)
        except ValueError:
            raise ValueError(f"unknown source flag {source!r}")
    readings = []
    root = head.header.state_root_hash
    for _, value in node.trie.items(root, AIR_NAMESPACE):
        try:
            reading = decode_reading(value)
        except CodecError:
            logger.warning("undecodable reading value in state")
            continue
        if not (min_lat <= reading.lat_udeg <= max_lat):
            continue
        if not (min_lon <= reading.lon_udeg <= max_lon):
            continue
        if from_s is not None and reading.timestamp_s < from_s:
            continue
        if to_s is not None and reading.timestamp_s > to_s:
            continue
        if source is not None and reading.source_flag.value != source:
            continue
        readings.append(reading.to_record())
    readings.sort(key=lambda r: (-r["timestamp_s"], r["reporter_public_key"]))
    return "ok", {"readings": readings}


def _accounts_record(node: NodeView) -> dict:
    accounts = []
    for account in node.registry.accounts():
        accounts.append(
            {
                "account_id": account.account_id,
                "api_keys": [
                    {"key": k.key, "status": k.status, "issued_at": k.issued_at}
                    for k in account.api_keys
                ],
                "flags": account.flags,
            }
        )
    accounts.sort(key=lambda a: a["account_id"])
    return {"accounts": accounts}


def handle_admin(node: NodeView, method: str, path: str) -> tuple[str, dict]:
    """POST /accounts/{id}/keys and DELETE /keys/{key}."""
    match = re.fullmatch(r"/accounts/([A-Za-z0-9_.-]+)/keys", path)
    if method == "POST" and match:
        key = node.registry.issue_key(match.group(1))
        return "ok", {"account_id": match.group(1), "key": key, "status": "active"}
    match = re.fullmatch(r"/keys/([0-9a-f]+)", path)
    if method == "DELETE" and match:
        try:
            node.registry.revoke_key(match.group(1))
        except registry_mod.UnknownKeyError:
            return "not-found", {"error": "unknown key"}
        return "ok", {"key": match.group(1), "status": "revoked"}
    return "not-found", {"error": f"unknown route {method} {path}"}


def _int_param(params: dict, name: str, default):
    raw = params.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ValueError(f"parameter {name} must be an integer") from None


# --- HTTP adapter ---


# --- HTTP client helpers (CLI, ingest, tests) ---


def http_post_batches(endpoint: str, body: bytes, api_key: str, timeout=10.0) -> dict:
    from urllib import error, request

    from airchain.codec import canonical_decode
    from airchain.ingest import TransportFailure

    req = request.Request(
        endpoint.rstrip("/") + "/batches",
        data=body,
        headers={"Content-Type": "application/json", API_KEY_HEADER: api_key},
        method="POST",
    )
    try:
        with request.urlopen(req, timeout=timeout) as resp:
            return canonical_decode(resp.read())
    except error.HTTPError as exc:
        return canonical_decode(exc.read())
    except (error.URLError, OSError, TimeoutError) as exc:
        raise TransportFailure(str(exc)) from exc


def http_get(endpoint: str, path: str, params: Optional[dict] = None, timeout=10.0):
    from urllib import error, parse, request

    from airchain.codec import canonical_decode
    from airchain.ingest import TransportFailure

    url = endpoint.rstrip("/") + path
    if params:
        url += "?" + parse.urlencode(params)
    try:
        with request.urlopen(request.Request(url), timeout=timeout) as resp:
            return resp.status, canonical_decode(resp.read())
    except error.HTTPError as exc:
        return exc.code, canonical_decode(exc.read())
    except (error.URLError, OSError, TimeoutError) as exc:
        raise TransportFailure(str(exc)) from exc


def http_request(endpoint: str, method: str, path: str, timeout=10.0):
    from urllib import error, request

    from airchain.codec import canonical_decode
    from airchain.ingest import TransportFailure

    req = request.Request(endpoint.rstrip("/") + path, method=method)
    try:
        with request.urlopen(req, timeout=timeout) as resp:
            return resp.status, canonical_decode(resp.read())
    except error.HTTPError as exc:
        return exc.code, canonical_decode(exc.read())
    except (error.URLError, OSError, TimeoutError) as exc:
        raise TransportFailure(str(exc)) from exc


class ApiServer:
    """Thin ThreadingHTTPServer wrapper over the handlers above."""

    def __init__(self, node: NodeView, host: str = "127.0.0.1", port: int = DEFAULT_API_PORT):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("api: " + fmt, *args)

            def _respond(self, status_word: str, record: dict) -> None:
                body = canonical_encode(record)
                self.send_response(HTTP_STATUS.get(status_word, 500))
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header(
                    "Access-Control-Allow-Headers", f"Content-Type, {API_KEY_HEADER}"
                )
                self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
                self.end_headers()
                self.wfile.write(body)

            def do_OPTIONS(self):  # CORS preflight for the console
                self._respond("ok", {})

            def do_GET(self):
                url = urlsplit(self.path)
                params = dict(parse_qsl(url.query))
                status_word, record = handle_query(outer.node, url.path, params)
                self._respond(status_word, record)

            def do_POST(self):
                url = urlsplit(self.path)
                if url.path == "/batches":
                    length = int(self.headers.get("Content-Length", "0"))
                    body = self.rfile.read(length)
                    api_key = self.headers.get(API_KEY_HEADER)
                    status_word, record = handle_submit_batches(outer.node, body, api_key)
                    self._respond(status_word, record)
                    return
                status_word, record = handle_admin(outer.node, "POST", url.path)
                self._respond(status_word, record)

            def do_DELETE(self):
                url = urlsplit(self.path)
                status_word, record = handle_admin(outer.node, "DELETE", url.path)
                self._respond(status_word, record)

        self.node = node
        self._server = ThreadingHTTPServer((host, port), Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
