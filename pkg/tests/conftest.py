import random

import pytest

from airchain.crypto import keypair_generate
from airchain.txfamily import AirReading, SourceFlag


@pytest.fixture(scope="session")
def signer():
    return keypair_generate(seed=bytes.fromhex("11" * 32))


@pytest.fixture(scope="session")
def other_signer():
    return keypair_generate(seed=bytes.fromhex("22" * 32))


@pytest.fixture()
def rng():
    return random.Random(1234)


def make_reading(signer, *, pm2_5=35, timestamp_s=1_700_000_000, lat=38_895_000,
                 lon=-77_036_000, source=SourceFlag.CITIZEN):
    return AirReading(
        pm1_0=max(0, pm2_5 - 10),
        pm2_5=pm2_5,
        pm10_0=pm2_5 + 20,
        lat_udeg=lat,
        lon_udeg=lon,
        timestamp_s=timestamp_s,
        source_flag=source,
        reporter_public_key=signer.public_key,
    )


def random_reading(rng, signer, clock_s=1_700_000_000):
    return AirReading(
        pm1_0=rng.randint(0, 1000),
        pm2_5=rng.randint(0, 1000),
        pm10_0=rng.randint(0, 1000),
        lat_udeg=rng.randint(-90_000_000, 90_000_000),
        lon_udeg=rng.randint(-180_000_000, 180_000_000),
        timestamp_s=clock_s - rng.randint(0, 500_000),
        source_flag=rng.choice(list(SourceFlag)),
        reporter_public_key=signer.public_key,
    )


@pytest.fixture()
def reading(signer):
    return make_reading(signer)
