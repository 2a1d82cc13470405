"""Shared exception types, mapped to CLI exit codes (2: data, 3: numerical)."""


class DataError(Exception):
    """Dataset or file-format problem (missing file, bad shape, bad header)."""


class CheckpointError(DataError):
    """Malformed checkpoint: wrong magic, version mismatch, truncated blob."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required."""
