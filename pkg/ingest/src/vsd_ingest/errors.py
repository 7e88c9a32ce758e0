"""Pipeline failure types."""
from __future__ import annotations


class IngestError(Exception):
    """Base class for pipeline errors."""


class BackendUnavailable(IngestError):
    pass


class EmptyGeneration(IngestError):
    pass


class DimensionDrift(IngestError):
    def __init__(self, expected: int, got: int, where: str):
        self.expected = expected
        self.got = got
        super().__init__(f"encoder returned d={got} for {where}, expected d={expected}")


class DatasetError(IngestError):
    pass
