"""Exception types shared across the engine.

The CLI maps these onto process exit codes: validation/data problems
(:class:`ValidationError` and subclasses) exit 2, numeric failures
(:class:`NumericError`) exit 3. Usage errors are handled by the CLI itself.
"""

from __future__ import annotations


class SynthRegError(Exception):
    """Base class for all engine errors."""


class ValidationError(SynthRegError):
    """Invalid data or arguments: bad geometry, bad header, empty mask, ..."""


class HeaderParseError(ValidationError):
    """Malformed MetaImage or transform-file header."""


class TruncatedDataError(ValidationError):
    """Payload byte count does not match the header."""


class UnsupportedFormatError(ValidationError):
    """Element type, compression or transform variant we do not handle."""


class GeometryError(ValidationError):
    """Volume geometries that were required to match do not."""


class EmptyMaskError(ValidationError):
    """A body mask with no foreground voxels where one is required."""


class DegenerateRangeError(ValidationError):
    """Intensity normalization hit a zero-width range (hi == lo or sigma == 0)."""


class FoldingRiskError(ValidationError):
    """Requested synthetic deformation cannot be guaranteed diffeomorphic."""


class NumericError(SynthRegError):
    """Non-finite cost/gradient/coefficients during optimization.

    Carries the cost traces collected so far in ``traces`` for diagnosis.
    """

    def __init__(self, message: str, traces=None):
        super().__init__(message)
        self.traces = traces if traces is not None else []
