"""Air-quality transaction family: reading codec, validation, addressing,
state application, and linear-regression calibration.

Readings store particulate-matter concentrations as integer µg/m³ and
coordinates as integer microdegrees; keeping floats out of payloads is
what makes state roots bit-identical across nodes.  Addresses bucket
readings by reporter, 5-character geohash cell, and hour so repeated
reports from one station land on one state entry with last-write-wins
semantics.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional

from airchain.codec import CodecError, canonical_decode, canonical_encode
from airchain.trie import AIR_NAMESPACE

FAMILY_NAME = "airquality"
FAMILY_VERSION = "1.0"

PM_MAX = 1000  # µg/m³ ceiling, above any plausible ambient value
LAT_MAX_UDEG = 90_000_000
LON_MAX_UDEG = 180_000_000
CLOCK_SKEW_S = 300  # readings may lead the validator clock by this much


class SourceFlag(str, Enum):
    CITIZEN = "citizen"
    GOVERNMENT = "government"
    INSTITUTIONAL = "institutional"
    OTHER = "other"


class InvalidTransaction(Exception):
    """Transaction rejected by a family handler; carries the violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class AirReading:
    pm1_0: int
    pm2_5: int
    pm10_0: int
    lat_udeg: int
    lon_udeg: int
    timestamp_s: int
    source_flag: SourceFlag
    reporter_public_key: str

    def to_record(self) -> dict:
        return {
            "pm1_0": self.pm1_0,
            "pm2_5": self.pm2_5,
            "pm10_0": self.pm10_0,
            "lat_udeg": self.lat_udeg,
            "lon_udeg": self.lon_udeg,
            "timestamp_s": self.timestamp_s,
            "source_flag": self.source_flag.value,
            "reporter_public_key": self.reporter_public_key,
        }


def encode_reading(reading: AirReading) -> bytes:
    return canonical_encode(reading.to_record())


def decode_reading(data: bytes) -> AirReading:
    rec = canonical_decode(data)
    try:
        reading = AirReading(
            pm1_0=rec["pm1_0"],
            pm2_5=rec["pm2_5"],
            pm10_0=rec["pm10_0"],
            lat_udeg=rec["lat_udeg"],
            lon_udeg=rec["lon_udeg"],
            timestamp_s=rec["timestamp_s"],
            source_flag=SourceFlag(rec["source_flag"]),
            reporter_public_key=rec["reporter_public_key"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"malformed reading payload: {exc}") from exc
    for name in ("pm1_0", "pm2_5", "pm10_0", "lat_udeg", "lon_udeg", "timestamp_s"):
        if not isinstance(getattr(reading, name), int):
            raise CodecError(f"reading field {name} must be an integer")
    if not isinstance(reading.reporter_public_key, str):
        raise CodecError("reporter_public_key must be a string")
    return reading


def validate_reading(reading: AirReading, validator_clock_s: int) -> list[str]:
    violations = []
    for name in ("pm1_0", "pm2_5", "pm10_0"):
        value = getattr(reading, name)
        if not 0 <= value <= PM_MAX:
            violations.append(f"pm out of range: {name}={value}")
    if not -LAT_MAX_UDEG <= reading.lat_udeg <= LAT_MAX_UDEG:
        violations.append(f"latitude out of range: {reading.lat_udeg}")
    if not -LON_MAX_UDEG <= reading.lon_udeg <= LON_MAX_UDEG:
        violations.append(f"longitude out of range: {reading.lon_udeg}")
    if not isinstance(reading.source_flag, SourceFlag):
        violations.append(f"unknown source flag: {reading.source_flag}")
    if reading.timestamp_s > validator_clock_s + CLOCK_SKEW_S:
        violations.append(
            f"timestamp {reading.timestamp_s} too far in the future of clock "
            f"{validator_clock_s}"
        )
    return violations


# --- addressing ---

_GEOHASH32 = "0123456789bcdefghjkmnpqrstuvwxyz"
# 5 geohash chars = 25 interleaved bits = at most 13 halvings per axis;
# the <<13 scale keeps every interval midpoint an exact integer.
_GEO_SHIFT = 13


def geohash5(lat_udeg: int, lon_udeg: int) -> str:
    """Standard 5-character geohash computed in pure integer arithmetic."""
    lat_lo, lat_hi = -LAT_MAX_UDEG << _GEO_SHIFT, LAT_MAX_UDEG << _GEO_SHIFT
    lon_lo, lon_hi = -LON_MAX_UDEG << _GEO_SHIFT, LON_MAX_UDEG << _GEO_SHIFT
    lat_v, lon_v = lat_udeg << _GEO_SHIFT, lon_udeg << _GEO_SHIFT
    bits = 0
    for i in range(25):
        if i % 2 == 0:  # even bit index: longitude
            mid = (lon_lo + lon_hi) // 2
            if lon_v >= mid:
                bits = bits << 1 | 1
                lon_lo = mid
            else:
                bits <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) // 2
            if lat_v >= mid:
                bits = bits << 1 | 1
                lat_lo = mid
            else:
                bits <<= 1
                lat_hi = mid
    return "".join(
        _GEOHASH32[(bits >> shift) & 0x1F] for shift in (20, 15, 10, 5, 0)
    )


def hour_bucket(timestamp_s: int) -> int:
    return timestamp_s // 3600


def reading_address(reading: AirReading) -> str:
    """70-hex state address: air namespace + reporter/cell/hour digest."""
    seed = (
        reading.reporter_public_key
        + geohash5(reading.lat_udeg, reading.lon_udeg)
        + str(hour_bucket(reading.timestamp_s))
    )
    return AIR_NAMESPACE + hashlib.sha512(seed.encode("utf-8")).hexdigest()[:64]


# --- state application ---


class AirQualityHandler:
    """Applies airquality transactions to the state trie.

    Newer timestamps win at an address; a stale write succeeds as a
    no-op so benign races never fail a whole batch.
    """

    family_name = FAMILY_NAME
    family_versions = (FAMILY_VERSION,)

    def apply(self, txn, context) -> list[tuple[str, Optional[bytes]]]:
        header = txn.header
        if header.family_name != FAMILY_NAME:
            raise InvalidTransaction([f"unauthorized family {header.family_name}"])
        try:
            reading = decode_reading(txn.payload)
        except CodecError as exc:
            raise InvalidTransaction([f"payload codec error: {exc}"]) from exc
        violations = validate_reading(reading, context.clock_s)
        if reading.reporter_public_key != header.signer_public_key:
            violations.append("reporter key does not match transaction signer")
        if violations:
            raise InvalidTransaction(violations)
        address = reading_address(reading)
        existing = context.get(address)
        if existing is not None:
            stored = decode_reading(existing)
            if stored.timestamp_s >= reading.timestamp_s:
                return []  # stale: keep the newer stored entry
        return [(address, encode_reading(reading))]


# --- calibration ---


class FitError(ValueError):
    """Calibration fit is underdetermined."""


@dataclass(frozen=True)
class CalibrationModel:
    slope: Fraction
    intercept: Fraction  # µg/m³

    def to_record(self) -> dict:
        return {
            "slope_num": self.slope.numerator,
            "slope_den": self.slope.denominator,
            "intercept_num": self.intercept.numerator,
            "intercept_den": self.intercept.denominator,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CalibrationModel":
        if rec["slope_den"] == 0 or rec["intercept_den"] == 0:
            raise ValueError("calibration denominator must be nonzero")
        return cls(
            slope=Fraction(rec["slope_num"], rec["slope_den"]),
            intercept=Fraction(rec["intercept_num"], rec["intercept_den"]),
        )

    @classmethod
    def identity(cls) -> "CalibrationModel":
        return cls(slope=Fraction(1), intercept=Fraction(0))


def calibrate(raw: int, model: CalibrationModel) -> int:
    """Corrected µg/m³: round-half-up(slope·raw + intercept), clamped [0, PM_MAX]."""
    corrected = model.slope * raw + model.intercept
    rounded = math.floor(corrected + Fraction(1, 2))
    return max(0, min(PM_MAX, rounded))


def fit_calibration(pairs) -> CalibrationModel:
    """Ordinary least squares over (raw, reference) pairs, exact rationals."""
    pts = [(Fraction(x), Fraction(y)) for x, y in pairs]
    n = len(pts)
    if n < 2:
        raise FitError("need at least two calibration pairs")
    sum_x = sum(x for x, _ in pts)
    sum_y = sum(y for _, y in pts)
    sum_xy = sum(x * y for x, y in pts)
    sum_xx = sum(x * x for x, _ in pts)
    denom = n * sum_xx - sum_x * sum_x
    if denom == 0:
        raise FitError("raw values have zero variance")
    slope = Fraction(n * sum_xy - sum_x * sum_y, denom)
    intercept = (sum_y - slope * sum_x) / n
    return CalibrationModel(slope=slope, intercept=intercept)
