"""Operator command line: run nodes and scenarios, manage keys, submit
and query readings.

Exit codes: 0 success, 1 invariant violation (failed scenario, rejected
submission), 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
import time

from airchain import api
from airchain.codec import canonical_encode
from airchain.crypto import CryptoError, keypair_generate, read_key_file, write_key_file
from airchain.ingest import SubmitRejected, TransportFailure, submit as ingest_submit
from airchain.node import LiveNode, NodeConfig, NodeStartupError, build_genesis
from airchain.simulation import Scenario, ScenarioRunner
from airchain.txfamily import AirReading, SourceFlag

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2

CONFIG_ENV_VAR = "AIRCHAIN_CONFIG"


def _cmd_keygen(args) -> int:
    seed = bytes.fromhex(args.seed) if args.seed else None
    try:
        pair = keypair_generate(seed=seed)
    except (CryptoError, ValueError) as exc:
        print(f"keygen failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_key_file(args.key_file, pair)
    print(f"wrote {args.key_file} (public key {pair.public_key})")
    return EXIT_OK


def _cmd_genesis(args) -> int:
    try:
        signer = read_key_file(args.key_file)
        block = build_genesis(signer, algorithm=args.algorithm)
    except (CryptoError, NodeStartupError, OSError) as exc:
        print(f"genesis failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    with open(args.out, "wb") as fh:
        fh.write(block.encode() + b"\n")
    print(f"wrote genesis block {block.id[:16]}… to {args.out}")
    return EXIT_OK


def _cmd_run_node(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if not config_path:
        print(f"no --config and {CONFIG_ENV_VAR} unset", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = NodeConfig.from_file(config_path)
        node = LiveNode(config)
        node.start()
    except (NodeStartupError, CryptoError, OSError, json.JSONDecodeError) as exc:
        print(f"node startup failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    stop = {"flag": False}

    def handle_signal(_sig, _frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
    print(f"node {node.node_id[:16]}… serving api on port {node.api_server.port}")
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        node.stop()
    return EXIT_OK


def _cmd_run_scenario(args) -> int:
    try:
        with open(args.scenario, "r", encoding="utf-8") as fh:
            record = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        record["seed"] = args.seed
    try:
        scenario = Scenario.from_record(record)
    except (KeyError, TypeError, ValueError) as exc:
        print(f"malformed scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = ScenarioRunner(scenario).run()
    machine = canonical_encode(report).decode("utf-8")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(machine + "\n")
    print(f"scenario {report['scenario']} (seed {report['seed']})")
    print(f"  simulated {report['elapsed_ms']} ms, peer rounds {report['peer_rounds']}")
    heads = {name: rec["head_num"] for name, rec in report["nodes"].items()}
    print(f"  heads: {heads}")
    print(f"  identical honest heads: {bool(report['heads_identical'])}")
    print(
        f"  batches accepted/missing: {report['accepted_batches']}"
        f"/{report['missing_batches']}"
    )
    print(f"  messages sent/delivered: {report['messages_sent']}/{report['messages_delivered']}")
    print(f"  view changes: {report['view_changes']}; z-flags: {report['z_flags']}")
    if args.machine:
        print(machine)
    if report["violations"]:
        print("violations:")
        for violation in report["violations"]:
            print(f"  - {violation}")
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_submit(args) -> int:
    try:
        signer = read_key_file(args.key_file)
    except (CryptoError, OSError) as exc:
        print(f"cannot load key file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = random.Random(args.seed if args.seed is not None else None)
    now_s = int(time.time())
    readings = []
    for _ in range(args.count):
        readings.append(
            AirReading(
                pm1_0=args.pm1 if args.pm1 is not None else rng.randint(0, 50),
                pm2_5=args.pm25 if args.pm25 is not None else rng.randint(0, 150),
                pm10_0=args.pm10 if args.pm10 is not None else rng.randint(0, 300),
                lat_udeg=args.lat_udeg,
                lon_udeg=args.lon_udeg,
                timestamp_s=now_s,
                source_flag=SourceFlag(args.source),
                reporter_public_key=signer.public_key,
            )
        )

    def post(body, api_key):
        return api.http_post_batches(args.endpoint, body, api_key)

    try:
        receipt = ingest_submit(readings, signer, args.api_key, post)
    except SubmitRejected as exc:
        print(f"rejected: {exc.status} {exc.detail or ''}", file=sys.stderr)
        return EXIT_VIOLATION
    except TransportFailure as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    print(f"accepted batch {receipt['batch_id']}")
    return EXIT_OK


def _cmd_query(args) -> int:
    params = {}
    for pair in args.param or []:
        if "=" not in pair:
            print(f"bad --param {pair!r}, expected name=value", file=sys.stderr)
            return EXIT_USAGE
        name, value = pair.split("=", 1)
        params[name] = value
    path = args.path if args.path.startswith("/") else "/" + args.path
    try:
        status, record = api.http_get(args.endpoint, path, params)
    except TransportFailure as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    print(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK if status < 400 else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airchain",
        description="Permissioned blockchain for particulate-matter telemetry",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a secp256k1 key file")
    p.add_argument("--key-file", required=True)
    p.add_argument("--seed", help="32-byte hex seed for deterministic keys")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("genesis", help="build a genesis block file")
    p.add_argument("--key-file", required=True)
    p.add_argument("--algorithm", default="poet_cft", choices=["pbft", "poet_cft", "raft"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_genesis)

    p = sub.add_parser("run-node", help="run a validator node")
    p.add_argument("--config", help=f"node config JSON (or ${CONFIG_ENV_VAR})")
    p.set_defaults(func=_cmd_run_node)

    p = sub.add_parser("run-scenario", help="run a deterministic multi-node simulation")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="write the machine-readable report here")
    p.add_argument("--machine", action="store_true", help="print the canonical report")
    p.set_defaults(func=_cmd_run_scenario)

    p = sub.add_parser("submit", help="submit emulated readings to a node")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--key-file", required=True)
    p.add_argument("--api-key", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--pm1", type=int)
    p.add_argument("--pm25", type=int)
    p.add_argument("--pm10", type=int)
    p.add_argument("--lat-udeg", type=int, default=38_895_000)
    p.add_argument("--lon-udeg", type=int, default=-77_036_000)
    p.add_argument("--source", default="citizen",
                   choices=[f.value for f in SourceFlag])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_submit)

    p = sub.add_parser("query", help="query a node's REST API")
    p.add_argument("--endpoint", required=True)
    p.add_argument("path", help="for example /blocks, /readings, /status")
    p.add_argument("--param", action="append", help="name=value, repeatable")
    p.set_defaults(func=_cmd_query)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
