"""Pluggable, runtime-switchable consensus engines and analysis tools."""

from airchain.consensus.analysis import (
    InsufficientData,
    WinRate,
    WinTracker,
    max_faults,
    sybil_threshold,
    ztest_winrate,
    ZTEST_MIN_ROUNDS,
    ZTEST_THRESHOLD,
)
from airchain.consensus.base import (
    ConsensusError,
    ConsensusParams,
    Engine,
    active_algorithm,
    create_engine,
    decode_payload,
    encode_payload,
    engine_class,
    verify_chain,
    verify_payload_static,
)
from airchain.consensus.pbft import ByzantinePbftEngine, PbftEngine
from airchain.consensus.poet import PoetEngine, poet_draw_wait, poet_elect
from airchain.consensus.raft import RaftEngine

__all__ = [
    "ByzantinePbftEngine",
    "ConsensusError",
    "ConsensusParams",
    "Engine",
    "InsufficientData",
    "PbftEngine",
    "PoetEngine",
    "RaftEngine",
    "WinRate",
    "WinTracker",
    "ZTEST_MIN_ROUNDS",
    "ZTEST_THRESHOLD",
    "active_algorithm",
    "create_engine",
    "decode_payload",
    "encode_payload",
    "engine_class",
    "max_faults",
    "poet_draw_wait",
    "poet_elect",
    "sybil_threshold",
    "verify_chain",
    "verify_payload_static",
    "ztest_winrate",
]
