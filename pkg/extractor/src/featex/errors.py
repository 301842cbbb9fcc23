"""Exception types for the featex package."""


class FeatexError(Exception):
    """Base class for all errors raised by featex."""


class UnknownModelError(FeatexError):
    """The requested model id is not in the registry."""


class MissingWeightsError(FeatexError):
    """No weights file exists for the requested model."""


class LayerRangeError(FeatexError):
    """The requested layer index is outside the model's layer table."""


class GeometryError(FeatexError):
    """Output geometry does not match the input geometry."""


class HeaderError(FeatexError):
    """A MetaImage header could not be parsed or is unsupported."""


class DataError(FeatexError):
    """Image payload is truncated, non-finite, or otherwise invalid."""
