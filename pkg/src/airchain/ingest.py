"""Sensor-side pipeline: serial text to signed batch submissions.

The emulated device prints one reading as three CRLF-delimited lines
("PM1: n", "PM2.5: n", "PM10: n"); the parser is chunking-invariant, so
a byte stream split at any boundary yields the same readings.  Parsed
raw values go through linear calibration, buffer until the count or age
trigger fires, and leave as one signed batch per flush.  Submission is
fire-and-poll: the client never blocks on chain commitment.
"""

from __future__ import annotations

import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from airchain import ledger
from airchain.crypto import KeyPair
from airchain.txfamily import (
    AirReading,
    CalibrationModel,
    SourceFlag,
    calibrate,
    encode_reading,
)

logger = logging.getLogger(__name__)

CRLF = "\r\n"

_LINE_PATTERNS = {
    "pm1_0": re.compile(r"^PM1: (\d+)$"),
    "pm2_5": re.compile(r"^PM2\.5: (\d+)$"),
    "pm10_0": re.compile(r"^PM10: (\d+)$"),
}
_TRIPLE_ORDER = ("pm1_0", "pm2_5", "pm10_0")


@dataclass
class RawTriple:
    pm1_0: int
    pm2_5: int
    pm10_0: int


@dataclass
class ParseCarry:
    """Partial line text plus partial triple progress between chunks."""

    line_buffer: str = ""
    partial: dict = field(default_factory=dict)


def parse_serial_lines(chunk: str, carry: Optional[ParseCarry] = None) -> tuple[list[RawTriple], ParseCarry]:
    """Scan a text chunk for PM line triples.

    Returns completed readings and the carry to pass into the next call.
    Unrecognized lines are skipped with a diagnostic; a "PM1:" line
    always starts a fresh triple.
    """
    carry = carry if carry is not None else ParseCarry()
    text = carry.line_buffer + chunk
    lines = text.split(CRLF)
    carry.line_buffer = lines.pop()  # tail after the last CRLF, maybe partial
    readings = []
    for line in lines:
        matched = None
        for name, pattern in _LINE_PATTERNS.items():
            m = pattern.match(line)
            if m:
                matched = (name, int(m.group(1)))
                break
        if matched is None:
            if line:
                logger.debug("skipping unrecognized serial line %r", line)
            continue
        name, value = matched
        if name == "pm1_0":
            if carry.partial:
                logger.debug("discarding incomplete triple %r", carry.partial)
            carry.partial = {name: value}
        else:
            expected = _TRIPLE_ORDER[len(carry.partial)] if len(carry.partial) < 3 else None
            if expected != name:
                logger.debug("out-of-order line %r, resetting triple", line)
                carry.partial = {}
                continue
            carry.partial[name] = value
            if len(carry.partial) == 3:
                readings.append(RawTriple(**carry.partial))
                carry.partial = {}
    return readings, carry


def format_serial_triple(pm1_0: int, pm2_5: int, pm10_0: int) -> str:
    """Exactly what the flashed device prints for one reading."""
    return f"PM1: {pm1_0}{CRLF}PM2.5: {pm2_5}{CRLF}PM10: {pm10_0}{CRLF}"


# --- sensor emulation ---


@dataclass(frozen=True)
class SensorNoiseModel:
    rmse_ug_m3: float = 2.22
    consistency_bound: float = 0.10
    temp_range_c: tuple[float, float] = (-10.0, 60.0)
    humidity_range_pct: tuple[float, float] = (0.0, 99.0)

    def __post_init__(self):
        if self.rmse_ug_m3 <= 0:
            raise ValueError("rmse must be positive")
        if not 0 <= self.consistency_bound <= 1:
            raise ValueError("consistency bound must lie in [0, 1]")


def emulate_sensor(true_value: float, model: SensorNoiseModel, rng) -> int:
    """One raw integer sample: Gaussian noise at the characterized RMSE,
    hard-clamped into the ±consistency-bound window and floored at 0."""
    if true_value < 0:
        raise ValueError("true concentration cannot be negative")
    noisy = round(true_value + rng.gauss(0.0, model.rmse_ug_m3))
    low = true_value * (1.0 - model.consistency_bound)
    high = true_value * (1.0 + model.consistency_bound)
    clamped = max(math.ceil(low), min(math.floor(high), noisy))
    return max(0, clamped)


def environment_ok(temp_c: float, humidity_pct: float, model: SensorNoiseModel) -> bool:
    """Operating envelope check; out of range marks readings invalid."""
    t_lo, t_hi = model.temp_range_c
    h_lo, h_hi = model.humidity_range_pct
    return t_lo <= temp_c <= t_hi and h_lo <= humidity_pct <= h_hi


# --- buffering / flush trigger ---


@dataclass(frozen=True)
class BatchTriggerConfig:
    count_threshold: int = 10
    age_threshold_s: int = 60

    def __post_init__(self):
        if self.count_threshold <= 0 or self.age_threshold_s <= 0:
            raise ValueError("thresholds must be positive")


def batch_trigger(buffer: list, config: BatchTriggerConfig, now_s: int) -> str:
    """"flush" when the buffer hit the count or age threshold, else "hold".

    Buffer entries are (enqueued_at_s, reading); an empty buffer never flushes.
    """
    if not buffer:
        return "hold"
    if len(buffer) >= config.count_threshold:
        return "flush"
    oldest = min(at for at, _ in buffer)
    if now_s - oldest >= config.age_threshold_s:
        return "flush"
    return "hold"


# --- submission ---


class SubmitRejected(Exception):
    def __init__(self, status: str, detail):
        self.status = status
        self.detail = detail
        super().__init__(f"submission rejected: {status}")


class TransportFailure(Exception):
    pass


def submit(
    readings: list[AirReading],
    signer: KeyPair,
    api_key: str,
    post: Callable[[bytes, str], dict],
    retries: int = 3,
    backoff_s: float = 0.2,
    sleep=time.sleep,
    rng=None,
) -> dict:
    """Build one batch (one transaction per reading) and post it.

    `post(body, api_key)` is the transport: an HTTP client against a live
    node or a direct handler call in the simulator.  Transport failures
    retry with backoff up to `retries` times; rejection statuses from the
    node are surfaced verbatim.
    """
    if not readings:
        raise ValueError("nothing to submit")
    txns = [
        ledger.build_transaction(
            encode_reading(r), family="airquality", signer=signer, rng=rng
        )
        for r in readings
    ]
    batch = ledger.build_batch(txns, signer)
    body = ledger.encode_batch_list([batch])
    last_error = None
    for attempt in range(retries + 1):
        try:
            response = post(body, api_key)
            break
        except TransportFailure as exc:
            last_error = exc
            if attempt < retries:
                sleep(backoff_s * (2**attempt))
    else:
        raise TransportFailure(f"submission failed after {retries + 1} attempts: {last_error}")
    receipts = response.get("receipts", [])
    receipt = receipts[0] if receipts else {}
    if receipt.get("status") != "accepted":
        raise SubmitRejected(receipt.get("status", "unknown"), receipt.get("violations"))
    return receipt


@dataclass
class DevicePipeline:
    """One emulated device: noise model, calibration, buffer, submission."""

    signer: KeyPair
    api_key: str
    lat_udeg: int
    lon_udeg: int
    source_flag: SourceFlag = SourceFlag.CITIZEN
    noise: SensorNoiseModel = SensorNoiseModel()
    calibration: Optional[CalibrationModel] = None
    trigger: BatchTriggerConfig = BatchTriggerConfig()
    carry: ParseCarry = field(default_factory=ParseCarry)
    buffer: list = field(default_factory=list)

    def __post_init__(self):
        if self.calibration is None:
            self.calibration = CalibrationModel.identity()

    def sample(self, true_values: tuple[float, float, float], rng, now_s: int) -> str:
        """Emulate one sensor read; returns the serial text the device prints."""
        raws = [emulate_sensor(v, self.noise, rng) for v in true_values]
        return format_serial_triple(*raws)

    def feed_serial(self, chunk: str, now_s: int) -> list[AirReading]:
        triples, self.carry = parse_serial_lines(chunk, self.carry)
        readings = []
        for triple in triples:
            reading = AirReading(
                pm1_0=calibrate(triple.pm1_0, self.calibration),
                pm2_5=calibrate(triple.pm2_5, self.calibration),
                pm10_0=calibrate(triple.pm10_0, self.calibration),
                lat_udeg=self.lat_udeg,
                lon_udeg=self.lon_udeg,
                timestamp_s=now_s,
                source_flag=self.source_flag,
                reporter_public_key=self.signer.public_key,
            )
            self.buffer.append((now_s, reading))
            readings.append(reading)
        return readings

    def maybe_flush(self, now_s: int) -> Optional[list[AirReading]]:
        if batch_trigger(self.buffer, self.trigger, now_s) == "hold":
            return None
        readings = [r for _, r in self.buffer]
        self.buffer = []
        return readings
