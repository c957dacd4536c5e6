"""Fault-tolerance arithmetic and lottery-fairness monitoring."""

from __future__ import annotations

import math
from typing import NamedTuple

# One-sided 99.5% confidence; win-rate checks need a minimum sample first.
ZTEST_THRESHOLD = 2.575
ZTEST_MIN_ROUNDS = 100


class InsufficientData(ValueError):
    """Too few observed rounds for a meaningful win-rate z-test."""


class WinRate(NamedTuple):
    z: float
    flagged: bool


def max_faults(n: int) -> int:
    """Byzantine faults tolerable by n nodes: f = floor((n - 1) / 3)."""
    if n < 1:
        raise ValueError("need at least one node")
    return (n - 1) // 3


def ztest_winrate(wins_i: int, rounds: int, n: int) -> WinRate:
    """Standardized deviation of a node's election wins from 1/n.

    z = (wins - rounds/n) / sqrt(rounds * p * (1 - p)) with p = 1/n;
    flagged when z exceeds the one-sided 99.5% threshold.
    """
    if n < 2:
        raise ValueError("win-rate test needs at least two nodes")
    if rounds < ZTEST_MIN_ROUNDS:
        raise InsufficientData(
            f"need at least {ZTEST_MIN_ROUNDS} rounds, have {rounds}"
        )
    p = 1.0 / n
    z = (wins_i - rounds * p) / math.sqrt(rounds * p * (1.0 - p))
    return WinRate(z=z, flagged=z > ZTEST_THRESHOLD)


def sybil_threshold(n) -> float:
    """Fraction of nodes sufficing to crack an enclave-lottery network.

    Models the asymptotic (log log n) / log n expression with natural
    logs and unit constant; defined only for n > e.
    """
    if n <= math.e:
        raise ValueError("sybil threshold defined only for n > e")
    return math.log(math.log(n)) / math.log(n)


class WinTracker:
    """Per-signer win counts over committed lottery rounds."""

    def __init__(self):
        self.wins: dict[str, int] = {}
        self.rounds_observed = 0

    def record(self, winner: str) -> None:
        self.wins[winner] = self.wins.get(winner, 0) + 1
        self.rounds_observed += 1

    def zscores(self, n: int) -> dict[str, WinRate]:
        if n < 2 or self.rounds_observed < ZTEST_MIN_ROUNDS:
            return {}
        return {
            node: ztest_winrate(wins, self.rounds_observed, n)
            for node, wins in self.wins.items()
        }
