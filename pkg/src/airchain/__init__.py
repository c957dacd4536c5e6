"""AirChain: a permissioned blockchain for particulate-matter telemetry."""

__version__ = "0.1.0"
