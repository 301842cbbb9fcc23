"""Body-mask handling and modality-specific intensity normalization.

All three modalities are normalized inside the patient body mask and set to
-1 outside it:

* CT: clip to [-1024, 3071] HU, map that range linearly onto [-1, 1].
* CBCT: map [in-mask minimum, in-mask 99.5th percentile] onto [-1, 1],
  clipping above.
* MRI: z-score over in-mask voxels (population sigma), no clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateRangeError, EmptyMaskError, ValidationError
from .volume import Volume, require_same_grid

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class NormalizationSpec:
    """Fixed constants of the intensity normalizations."""

    ct_clip_lo: float = -1024.0
    ct_clip_hi: float = 3071.0
    cbct_upper_percentile: float = 0.995
    fill_value: float = -1.0

    def __post_init__(self):
        if self.ct_clip_lo >= self.ct_clip_hi:
            raise ValidationError("ct_clip_lo must be < ct_clip_hi")
        if not 0.0 < self.cbct_upper_percentile < 1.0:
            raise ValidationError("cbct_upper_percentile must be in (0, 1)")


@dataclass(frozen=True)
class BodyMask:
    """Binary foreground mask sharing the geometry of the image it masks."""

    volume: Volume

    def __post_init__(self):
        vals = np.unique(self.volume.data)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValidationError(f"mask must be binary, found values {vals[:8]}")
        if self.volume.channels != 1:
            raise ValidationError("mask must be single-channel")

    @classmethod
    def from_volume(cls, v: Volume) -> "BodyMask":
        """Binarize with the > 0.5 convention (robust to prior resampling)."""
        data = (v.scalar() > 0.5).astype(np.float32)
        return cls(v.with_data(data, semantics="label", element_type="MET_UCHAR"))

    @property
    def indicator(self) -> np.ndarray:
        """(z, y, x) boolean foreground array."""
        return self.volume.data[..., 0] > 0.5

    @property
    def count(self) -> int:
        return int(self.indicator.sum())

    def require_nonempty(self) -> None:
        if self.count == 0:
            raise EmptyMaskError("mask has no foreground voxels")


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile at rank q*(n-1) of the sorted values.

    Args:
        values: nonempty sequence.
        q: fraction in [0, 1].
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("percentile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"percentile fraction must be in [0, 1], got {q}")
    return float(np.quantile(arr, q, method="linear"))


def _masked_output(v: Volume, mask: BodyMask, inside_values: np.ndarray,
                   fill: float) -> Volume:
    out = np.full(v.data.shape[:3], fill, dtype=np.float32)
    ind = mask.indicator
    out[ind] = inside_values.astype(np.float32)
    return v.with_data(out[..., np.newaxis], semantics="normalized",
                       element_type="MET_FLOAT")


def preprocess_ct(v: Volume, mask: BodyMask, spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    """Clip to the fixed HU window and map it linearly onto [-1, 1]."""
    require_same_grid(v, mask.volume, "image and mask")
    lo, hi = spec.ct_clip_lo, spec.ct_clip_hi
    vals = v.scalar()[mask.indicator].astype(np.float64)
    clipped = np.clip(vals, lo, hi)
    normed = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    return _masked_output(v, mask, normed, spec.fill_value)


def preprocess_cbct(v: Volume, mask: BodyMask, spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    """Map [in-mask min, in-mask upper percentile] onto [-1, 1], clip above.

    The percentile is taken on the volume as given; any resampling the
    caller applies afterwards does not change the normalization window.
    """
    require_same_grid(v, mask.volume, "image and mask")
    mask.require_nonempty()
    vals = v.scalar()[mask.indicator].astype(np.float64)
    lo = float(vals.min())
    hi = percentile(vals, spec.cbct_upper_percentile)
    if hi == lo:
        raise DegenerateRangeError(
            f"in-mask intensity window is degenerate (lo == hi == {lo})"
        )
    normed = 2.0 * (np.clip(vals, lo, hi) - lo) / (hi - lo) - 1.0
    return _masked_output(v, mask, normed, spec.fill_value)


def preprocess_mri(v: Volume, mask: BodyMask, spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    """Z-score over in-mask voxels (population sigma), no clipping."""
    require_same_grid(v, mask.volume, "image and mask")
    mask.require_nonempty()
    vals = v.scalar()[mask.indicator].astype(np.float64)
    if vals.size < 2:
        raise ValidationError("MRI standardization needs >= 2 in-mask voxels")
    mu = float(vals.mean())
    sigma = float(vals.std())  # population: divide by n
    if sigma == 0.0:
        raise DegenerateRangeError("in-mask intensities are constant (sigma = 0)")
    return _masked_output(v, mask, (vals - mu) / sigma, spec.fill_value)


def preprocess(v: Volume, mask: BodyMask, modality: str,
               spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    """Dispatch on modality name (case-insensitive: ct, cbct, mri)."""
    fn = {"ct": preprocess_ct, "cbct": preprocess_cbct, "mri": preprocess_mri}.get(
        modality.lower()
    )
    if fn is None:
        raise ValidationError(f"unknown modality {modality!r} (expected ct, cbct or mri)")
    return fn(v, mask, spec)


def compute_body_mask(v: Volume, threshold: float, closing_radius: int = 0) -> BodyMask:
    """Threshold, morphologically close, keep the largest 6-connected blob.

    A convenience for synthetic data; measured data ships with curated masks.
    """
    fg = v.scalar() > threshold
    if closing_radius > 0:
        fg = ndimage.binary_closing(
            fg, structure=_SIX_CONNECTED, iterations=closing_radius
        )
    labels, n = ndimage.label(fg, structure=_SIX_CONNECTED)
    if n == 0:
        raise EmptyMaskError("thresholding produced no foreground voxels")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    keep = 1 + int(np.argmax(sizes))
    data = (labels == keep).astype(np.float32)
    return BodyMask(v.with_data(data[..., np.newaxis], semantics="label",
                                element_type="MET_UCHAR"))
