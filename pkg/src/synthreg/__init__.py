"""Deformable registration and image-quality evaluation for synthetic CT."""

__version__ = "0.1.0"

from .bspline import (
    BSplineTransform,
    DeformationSpec,
    load_transform_json,
    make_grid_for_domain,
    random_deformation,
    refine_dyadic,
    save_transform_json,
    warp_volume,
)
from .elastix import parse_elastix_transform, write_elastix_transform
from .ensemble import FlipSpec, flip, fold_ensemble, tta_average
from .errors import (
    DegenerateRangeError,
    EmptyMaskError,
    FoldingRiskError,
    GeometryError,
    HeaderParseError,
    NumericError,
    SynthRegError,
    TruncatedDataError,
    UnsupportedFormatError,
    ValidationError,
)
from .evaluation import (
    AggregateReport,
    MetricsReport,
    aggregate_regions,
    case_report,
    dice,
    error_map,
    hd95,
    mae,
    ms_ssim,
    psnr,
)
from .mha import load_mha, write_mha
from .phantom import (
    Phantom,
    landmark_tre,
    load_landmarks,
    make_phantom,
    modality_remap,
    save_landmarks,
)
from .preprocess import BodyMask, NormalizationSpec, compute_body_mask, preprocess
from .registration import (
    OptimizerConfig,
    RegistrationConfig,
    RegistrationResult,
    evaluate_cost_trace,
    register,
)
from .similarity import (
    MattesConfig,
    MindConfig,
    SamplePlan,
    mind_descriptor,
    plan_full_grid,
    plan_uniform_random,
)
from .volume import (
    Geometry,
    Volume,
    gaussian_pyramid,
    make_volume,
    resample,
    sample_linear,
    sample_volume,
    sample_with_gradient,
    set_max_threads,
    smooth_gaussian,
)

__all__ = [
    "AggregateReport",
    "BSplineTransform",
    "BodyMask",
    "DeformationSpec",
    "DegenerateRangeError",
    "EmptyMaskError",
    "FlipSpec",
    "FoldingRiskError",
    "Geometry",
    "GeometryError",
    "HeaderParseError",
    "MattesConfig",
    "MetricsReport",
    "MindConfig",
    "NormalizationSpec",
    "NumericError",
    "OptimizerConfig",
    "Phantom",
    "RegistrationConfig",
    "RegistrationResult",
    "SamplePlan",
    "SynthRegError",
    "TruncatedDataError",
    "UnsupportedFormatError",
    "ValidationError",
    "Volume",
    "__version__",
    "aggregate_regions",
    "case_report",
    "compute_body_mask",
    "dice",
    "error_map",
    "evaluate_cost_trace",
    "flip",
    "fold_ensemble",
    "gaussian_pyramid",
    "hd95",
    "landmark_tre",
    "load_landmarks",
    "load_mha",
    "load_transform_json",
    "mae",
    "make_grid_for_domain",
    "make_phantom",
    "make_volume",
    "mind_descriptor",
    "modality_remap",
    "ms_ssim",
    "parse_elastix_transform",
    "plan_full_grid",
    "plan_uniform_random",
    "preprocess",
    "psnr",
    "random_deformation",
    "refine_dyadic",
    "register",
    "resample",
    "sample_linear",
    "sample_volume",
    "sample_with_gradient",
    "save_landmarks",
    "save_transform_json",
    "set_max_threads",
    "smooth_gaussian",
    "tta_average",
    "warp_volume",
    "write_elastix_transform",
    "write_mha",
]
