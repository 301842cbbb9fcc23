"""Feature-map extraction from frozen encoders to MetaImage volumes."""

from .errors import (
    DataError,
    FeatexError,
    GeometryError,
    HeaderError,
    LayerRangeError,
    MissingWeightsError,
    UnknownModelError,
)
from .extract import (
    ExtractorSpec,
    available_models,
    default_weights_dir,
    extract,
    init_weights,
    list_layers,
    weights_path,
)
from .mio import MetaVolume, read_mha, write_mha

__all__ = [
    "DataError",
    "ExtractorSpec",
    "FeatexError",
    "GeometryError",
    "HeaderError",
    "LayerRangeError",
    "MetaVolume",
    "MissingWeightsError",
    "UnknownModelError",
    "available_models",
    "default_weights_dir",
    "extract",
    "init_weights",
    "list_layers",
    "read_mha",
    "weights_path",
    "write_mha",
]
