"""Exception types raised by the toolkit.

Every domain failure derives from :class:`VsdAlignError` so that the CLI can
map any of them to exit code 1 with a structured diagnostic.
"""
from __future__ import annotations


class VsdAlignError(Exception):
    """Base class for all domain errors."""


class FormatError(VsdAlignError):
    """Malformed on-disk artifact (EMB1 file, manifest, checkpoint)."""


class BadMagic(FormatError):
    def __init__(self, path, found: bytes):
        self.offset = 0
        super().__init__(f"{path}: bad magic {found!r} at byte offset 0")


class TruncatedFile(FormatError):
    def __init__(self, path, offset: int, expected: int):
        self.offset = offset
        super().__init__(
            f"{path}: file ends at byte offset {offset}, expected {expected} bytes"
        )


class NonFiniteValue(VsdAlignError):
    def __init__(self, where, offset: int | None = None):
        self.offset = offset
        at = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"non-finite value in {where}{at}")


class ZeroRow(VsdAlignError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"row {index} has zero norm and cannot be normalized")


class EmptySequence(VsdAlignError):
    pass


class ShapeMismatch(VsdAlignError):
    pass


class StaleCache(VsdAlignError):
    pass


class RowNotNormalized(VsdAlignError):
    pass


class NonPositiveTemperature(VsdAlignError):
    pass


class NonPositiveEpsilon(VsdAlignError):
    pass


class NumericOverflow(VsdAlignError):
    pass


class KExceedsN(VsdAlignError):
    pass


class DegeneratePoints(VsdAlignError):
    pass


class DimensionMismatch(VsdAlignError):
    pass


class BatchTooSmall(VsdAlignError):
    pass


class ManifestMismatch(VsdAlignError):
    pass


class ConfigHashMismatch(VsdAlignError):
    pass
