"""Synthesis evaluation suite: masked MAE/PSNR/MS-SSIM, label-map Dice and
HD95, per-region aggregation, and error-map export.

Intensity metrics run over the body mask only; structural similarity runs
over the mask's bounding box with out-of-mask voxels held at the reference
in-mask mean so mask edges do not inject artificial structure. All
reductions accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d, distance_transform_edt

from .errors import EmptyMaskError, ValidationError
from .preprocess import BodyMask
from .volume import Volume, make_volume, require_same_grid

REGIONS = ("AB", "HN", "TH", "other")

# Per-scale exponent weights of the standard five-scale construction,
# renormalized when fewer scales fit the mask's bounding box.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5


@dataclass(frozen=True)
class MetricsReport:
    """Per-case evaluation results for one region."""

    case_id: str
    region: str
    mae: float
    psnr: float
    ms_ssim: float
    voxel_count: int
    dice: float | None = None
    hd95: float | None = None
    flags: tuple = ()

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValidationError(f"region must be one of {REGIONS}, got {self.region!r}")
        if self.mae < 0:
            raise ValidationError(f"mae must be >= 0, got {self.mae}")
        if not (0.0 <= self.ms_ssim <= 1.0):
            raise ValidationError(f"ms_ssim must be in [0, 1], got {self.ms_ssim}")
        if self.dice is not None and not (0.0 <= self.dice <= 1.0):
            raise ValidationError(f"dice must be in [0, 1], got {self.dice}")
        if self.hd95 is not None and self.hd95 < 0:
            raise ValidationError(f"hd95 must be >= 0, got {self.hd95}")

    def to_dict(self) -> dict:
        """JSON-ready mapping; an infinite PSNR becomes null plus a flag."""
        flags = list(self.flags)
        psnr_val = self.psnr
        if math.isinf(psnr_val):
            psnr_val = None
            if "psnr_infinite" not in flags:
                flags.append("psnr_infinite")
        return {
            "case_id": self.case_id,
            "region": self.region,
            "mae": self.mae,
            "psnr": psnr_val,
            "ms_ssim": self.ms_ssim,
            "dice": self.dice,
            "hd95": self.hd95,
            "voxel_count": self.voxel_count,
            "flags": flags,
        }


def _masked_pair(gt: Volume, pred: Volume, mask: BodyMask):
    require_same_grid(gt, pred, "ground truth and prediction")
    require_same_grid(gt, mask.volume, "ground truth and mask")
    mask.require_nonempty()
    sel = mask.indicator
    return gt.scalar()[sel].astype(np.float64), pred.scalar()[sel].astype(np.float64)


def mae(gt: Volume, pred: Volume, mask: BodyMask) -> float:
    """Mean absolute difference over in-mask voxels (HU for CT inputs)."""
    a, b = _masked_pair(gt, pred, mask)
    return float(np.mean(np.abs(a - b)))


def psnr(gt: Volume, pred: Volume, mask: BodyMask, data_range: float = 4095.0) -> float:
    """10 log10(data_range^2 / in-mask MSE) in dB; +inf when MSE is zero.

    The default range is the 3071 - (-1024) clip width of the CT
    normalization; pass data_range explicitly for other value domains.
    """
    if data_range <= 0:
        raise ValidationError(f"data_range must be > 0, got {data_range}")
    a, b = _masked_pair(gt, pred, mask)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(data_range * data_range / mse))


def _window_kernel() -> np.ndarray:
    half = (_WINDOW_SIZE - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / _WINDOW_SIGMA) ** 2)
    return k / k.sum()


def _local_mean(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = a
    for axis in (0, 1, 2):
        out = convolve1d(out, k, axis=axis, mode="constant")
    half = (_WINDOW_SIZE - 1) // 2
    return out[half:-half, half:-half, half:-half]


def _mask_bounding_box(mask: BodyMask):
    nz = np.nonzero(mask.indicator)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in nz)


def ms_ssim_scales(mask: BodyMask, scales: int = 5) -> int:
    """Number of dyadic scales that actually fit the mask bounding box.

    Each scale needs the full window after halving, so scale count M
    requires min bbox dimension >= 11 * 2^(M-1).
    """
    if scales < 1:
        raise ValidationError(f"scales must be >= 1, got {scales}")
    mask.require_nonempty()
    bbox = _mask_bounding_box(mask)
    min_dim = min(s.stop - s.start for s in bbox)
    if min_dim < _WINDOW_SIZE:
        raise ValidationError(
            f"mask bounding box min dimension {min_dim} is smaller than the "
            f"{_WINDOW_SIZE}-voxel analysis window")
    fit = int(np.floor(np.log2(min_dim / _WINDOW_SIZE))) + 1
    return min(scales, max(1, fit))


def _downsample2(a: np.ndarray) -> np.ndarray:
    nz, ny, nx = (d - d % 2 for d in a.shape)
    a = a[:nz, :ny, :nx]
    return a.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2).mean(axis=(1, 3, 5))


def ms_ssim(gt: Volume, pred: Volume, mask: BodyMask, scales: int = 5,
            data_range: float = 4095.0) -> float:
    """Multi-scale structural similarity over the mask bounding box.

    Per scale the Gaussian-windowed contrast/structure term is averaged
    (negatives clamped to zero so the product stays in [0, 1]); volumes are
    halved by 2x average pooling between scales; the luminance term enters
    at the coarsest scale only. scales=1 is plain windowed SSIM.
    """
    require_same_grid(gt, pred, "ground truth and prediction")
    require_same_grid(gt, mask.volume, "ground truth and mask")
    used = ms_ssim_scales(mask, scales)
    bbox = _mask_bounding_box(mask)

    sel = mask.indicator
    fill = float(gt.scalar()[sel].astype(np.float64).mean())
    x = np.where(sel, gt.scalar().astype(np.float64), fill)[bbox]
    y = np.where(sel, pred.scalar().astype(np.float64), fill)[bbox]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = _window_kernel()
    weights = np.asarray(MSSSIM_WEIGHTS[:used], dtype=np.float64)
    weights = weights / weights.sum()

    factors = []
    for s in range(used):
        mu_x = _local_mean(x, k)
        mu_y = _local_mean(y, k)
        sig_x = _local_mean(x * x, k) - mu_x * mu_x
        sig_y = _local_mean(y * y, k) - mu_y * mu_y
        sig_xy = _local_mean(x * y, k) - mu_x * mu_y
        cs = (2.0 * sig_xy + c2) / (sig_x + sig_y + c2)
        if s == used - 1:
            lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
            factors.append(np.mean(np.maximum(lum * cs, 0.0)))
        else:
            factors.append(np.mean(np.maximum(cs, 0.0)))
            x = _downsample2(x)
            y = _downsample2(y)
    value = float(np.prod(np.asarray(factors) ** weights))
    return min(1.0, max(0.0, value))


def _label_set(v: Volume, label: int) -> np.ndarray:
    return np.rint(v.scalar()).astype(np.int64) == int(label)


def dice(a: Volume, b: Volume, label: int = 1) -> float:
    """2|A and B| / (|A| + |B|); two empty sets count as perfect overlap."""
    require_same_grid(a, b, "label volumes")
    sa = _label_set(a, label)
    sb = _label_set(b, label)
    na, nb = int(sa.sum()), int(sb.sum())
    if na + nb == 0:
        return 1.0
    return float(2.0 * np.logical_and(sa, sb).sum() / (na + nb))


def _surface(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one six-connected background
    neighbor; voxels beyond the volume border count as background."""
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    interior = np.ones_like(fg)
    for axis in (0, 1, 2):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior = interior & padded[tuple(lo)] & padded[tuple(hi)]
    return fg & ~interior


def hd95(a: Volume, b: Volume, label: int = 1) -> float:
    """95th linear-interpolated percentile of the pooled bidirectional
    surface-to-surface Euclidean distances in mm."""
    require_same_grid(a, b, "label volumes")
    sa = _surface(_label_set(a, label))
    sb = _surface(_label_set(b, label))
    if not sa.any() or not sb.any():
        raise EmptyMaskError(
            f"surface distance undefined: label {label} empty in at least one volume")
    sampling = np.asarray(a.spacing[::-1], dtype=np.float64)  # (z, y, x)
    dist_to_b = distance_transform_edt(~sb, sampling=sampling)
    dist_to_a = distance_transform_edt(~sa, sampling=sampling)
    pooled = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(np.quantile(pooled, 0.95, method="linear"))


def error_map(gt: Volume, pred: Volume, mask: BodyMask) -> Volume:
    """Voxel-wise |gt - pred| inside the mask, zero outside (MET_FLOAT)."""
    require_same_grid(gt, pred, "ground truth and prediction")
    require_same_grid(gt, mask.volume, "ground truth and mask")
    diff = np.abs(gt.scalar().astype(np.float64) - pred.scalar().astype(np.float64))
    out = np.where(mask.indicator, diff, 0.0).astype(np.float32)
    return make_volume(out, spacing=gt.spacing, origin=gt.origin,
                       direction=gt.direction, semantics="feature",
                       element_type="MET_FLOAT")


@dataclass(frozen=True)
class AggregateReport:
    """Per-region metric means plus their unweighted cross-region mean."""

    per_region: dict
    aggregated: dict

    def __post_init__(self):
        for name, v in self.aggregated.items():
            vals = [r[name] for r in self.per_region.values()
                    if r.get(name) is not None]
            if vals and abs(v - float(np.mean(vals))) > 1e-6:
                raise ValidationError(
                    f"aggregated {name} does not equal the mean of its regions")

    def display(self) -> dict:
        """Aggregated values rounded to 2 decimals for table display."""
        return {k: (round(v, 2) if v is not None and math.isfinite(v) else v)
                for k, v in self.aggregated.items()}


def aggregate_regions(per_region: dict) -> AggregateReport:
    """Unweighted arithmetic mean of region means, full precision retained.

    Args:
        per_region: mapping region name -> {metric: mean}; metrics absent
            (or None) in a region are averaged over the regions that do
            carry them.
    """
    if not per_region:
        raise ValidationError("aggregate_regions needs at least one region")
    for region in per_region:
        if region not in REGIONS:
            raise ValidationError(f"unknown region {region!r}; expected one of {REGIONS}")
    metrics: dict[str, list] = {}
    for vals in per_region.values():
        for name, v in vals.items():
            if v is not None:
                metrics.setdefault(name, []).append(float(v))
    aggregated = {name: float(np.mean(vs)) for name, vs in metrics.items()}
    return AggregateReport(per_region={r: dict(v) for r, v in per_region.items()},
                           aggregated=aggregated)


def case_report(case_id: str, region: str, gt: Volume, pred: Volume,
                mask: BodyMask, gt_seg: Volume | None = None,
                pred_seg: Volume | None = None, label: int = 1,
                data_range: float = 4095.0, scales: int = 5) -> MetricsReport:
    """Assemble the full per-case report, recording degenerate conditions
    (infinite PSNR, reduced MS-SSIM scales, empty-vs-empty Dice) as flags."""
    flags = []
    p = psnr(gt, pred, mask, data_range)
    if math.isinf(p):
        flags.append("psnr_infinite")
    used = ms_ssim_scales(mask, scales)
    if used < scales:
        flags.append(f"ms_ssim_scales_reduced_to_{used}")
    d = h = None
    if gt_seg is not None and pred_seg is not None:
        d = dice(gt_seg, pred_seg, label)
        if not _label_set(gt_seg, label).any() and not _label_set(pred_seg, label).any():
            flags.append("dice_empty_sets")
            h = None
        else:
            h = hd95(gt_seg, pred_seg, label)
    elif (gt_seg is None) != (pred_seg is None):
        raise ValidationError("provide both segmentation volumes or neither")
    return MetricsReport(
        case_id=case_id,
        region=region,
        mae=mae(gt, pred, mask),
        psnr=p,
        ms_ssim=ms_ssim(gt, pred, mask, scales, data_range),
        voxel_count=mask.count,
        dice=d,
        hd95=h,
        flags=tuple(flags),
    )
