"""Registration similarity metrics: cost plus analytic gradient with
respect to the B-spline coefficients.

All metrics are oriented for minimization (mutual information is negated)
and share one gradient contract: ``grad`` is flat, aligned with
``BSplineTransform.flat_parameters()`` (all x-components, then y, then z).

Spatial gradients of the warped image are the exact derivatives of the
trilinear interpolant, so the analytic metric gradients agree with finite
differences of the sampled cost to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .bspline import BSplineTransform, bspline_weight_derivs, bspline_weights
from .errors import DegenerateRangeError, NumericError, ValidationError
from .preprocess import BodyMask
from .volume import Volume, sample_volume, sample_with_gradient


@dataclass(frozen=True)
class SamplePlan:
    """Fixed-image sample positions for one metric evaluation.

    Deterministic for a given seed; all points lie inside the fixed mask.
    """

    points: np.ndarray  # (N, 3) world coordinates
    seed: object
    strategy: str

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValidationError(f"plan points must be nonempty (N, 3), got {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]


def plan_full_grid(mask: BodyMask) -> SamplePlan:
    """Every in-mask voxel center."""
    mask.require_nonempty()
    zz, yy, xx = np.nonzero(mask.indicator)
    idx = np.stack([xx, yy, zz], axis=1).astype(np.float64)
    pts = mask.volume.geometry.index_to_world(idx)
    return SamplePlan(points=pts, seed=None, strategy="full-grid")


def plan_uniform_random(mask: BodyMask, count: int, seed) -> SamplePlan:
    """In-mask voxel centers drawn uniformly with replacement."""
    if count <= 0:
        raise ValidationError(f"sample count must be positive, got {count}")
    mask.require_nonempty()
    zz, yy, xx = np.nonzero(mask.indicator)
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(xx), size=count)
    idx = np.stack([xx[pick], yy[pick], zz[pick]], axis=1).astype(np.float64)
    pts = mask.volume.geometry.index_to_world(idx)
    return SamplePlan(points=pts, seed=seed, strategy="uniform-random")


@dataclass(frozen=True)
class MetricValueGrad:
    """Minimization-oriented cost and its flat parameter gradient."""

    cost: float
    grad: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grad, dtype=np.float64)
        if not np.isfinite(self.cost) or not np.isfinite(g).all():
            raise NumericError("metric produced non-finite cost or gradient")
        object.__setattr__(self, "grad", g)


def _param_gradient(t: BSplineTransform, plan: SamplePlan,
                    point_grads: np.ndarray) -> np.ndarray:
    """Push dcost/dT(x_s) (N, 3) through dT/dcoefficients; flat output."""
    ids, wts = t.support_weights(plan.points)
    g = np.zeros((t.n_control_points, 3), dtype=np.float64)
    for k in range(64):
        cid = ids[:, k]
        ok = cid >= 0
        if not ok.any():
            continue
        np.add.at(g, cid[ok], wts[ok, k, np.newaxis] * point_grads[ok])
    return g.T.reshape(-1)


def _require_single_channel(v: Volume, name: str) -> None:
    if v.channels != 1:
        raise ValidationError(f"{name} image must be single-channel, has {v.channels}")


def mse_metric(fixed: Volume, moving: Volume, t: BSplineTransform,
               plan: SamplePlan) -> MetricValueGrad:
    """Mean squared intensity difference over the plan."""
    _require_single_channel(fixed, "fixed")
    _require_single_channel(moving, "moving")
    f = sample_volume(fixed, plan.points)[:, 0]
    warped = t.transform_points(plan.points)
    m, g = sample_with_gradient(moving, warped)
    resid = f - m[:, 0]
    cost = float(np.mean(resid**2))
    point_grads = (-2.0 / plan.count) * resid[:, np.newaxis] * g[:, 0, :]
    return MetricValueGrad(cost=cost, grad=_param_gradient(t, plan, point_grads))


@dataclass(frozen=True)
class MattesConfig:
    """Parzen mutual-information settings.

    Intensity ranges are frozen from the unwarped volumes so the cost
    landscape does not drift between iterations: when not supplied, the
    fixed range comes from the plan's fixed samples and the moving range
    from the whole moving volume.
    """

    bins: int = 32
    fixed_range: tuple[float, float] | None = None
    moving_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.bins < 8:
            raise ValidationError(f"mattes bins must be >= 8, got {self.bins}")


def mattes_mi_metric(fixed: Volume, moving: Volume, t: BSplineTransform,
                     plan: SamplePlan, cfg: MattesConfig = MattesConfig()) -> MetricValueGrad:
    """Negated Parzen mutual information.

    Fixed intensities enter a zero-order (nearest-bin) window, moving
    intensities a cubic B-spline window; the gradient flows through the
    cubic kernel derivative, the warped image's spatial gradient and the
    transform Jacobian. Samples clamped at the bin range contribute zero
    gradient.
    """
    _require_single_channel(fixed, "fixed")
    _require_single_channel(moving, "moving")
    nbins = cfg.bins
    f = sample_volume(fixed, plan.points)[:, 0]

    f_lo, f_hi = cfg.fixed_range if cfg.fixed_range else (float(f.min()), float(f.max()))
    m_all = moving.data
    m_lo, m_hi = cfg.moving_range if cfg.moving_range else (float(m_all.min()), float(m_all.max()))
    if f_hi <= f_lo:
        raise DegenerateRangeError("fixed image intensity range is degenerate over the plan")
    if m_hi <= m_lo:
        raise DegenerateRangeError("moving image intensity range is degenerate")

    warped = t.transform_points(plan.points)
    m, g = sample_with_gradient(moving, warped)
    m = m[:, 0]

    # Map intensity onto continuous bin coordinates in [1, bins-3] so the
    # cubic window (base-1 .. base+2) always stays inside [0, bins-1].
    scale_f = (nbins - 4.0) / (f_hi - f_lo)
    uf = np.clip(1.0 + (f - f_lo) * scale_f, 1.0, nbins - 3.0)
    bf = np.minimum(np.floor(uf).astype(np.int64), nbins - 3)

    scale_m = (nbins - 4.0) / (m_hi - m_lo)
    um_raw = 1.0 + (m - m_lo) * scale_m
    active = (um_raw >= 1.0) & (um_raw <= nbins - 3.0)
    um = np.clip(um_raw, 1.0, nbins - 3.0)
    base = np.minimum(np.floor(um).astype(np.int64), nbins - 3)
    tm = um - base
    w = bspline_weights(tm)       # (N, 4)
    dw = bspline_weight_derivs(tm)

    joint = np.zeros((nbins, nbins), dtype=np.float64)
    for l in range(4):
        np.add.at(joint, (bf, base - 1 + l), w[:, l])
    joint /= plan.count
    pf = joint.sum(axis=1)
    pm = joint.sum(axis=0)

    nz = joint > 0.0
    outer = pf[:, np.newaxis] * pm[np.newaxis, :]
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    cost = -mi

    # dcost/du per sample; the marginal-entropy term cancels because the
    # kernel derivative weights sum to zero.
    dcost_du = np.zeros(plan.count, dtype=np.float64)
    for l in range(4):
        k = base - 1 + l
        pjoint = joint[bf, k]
        valid = (pjoint > 0.0) & (pm[k] > 0.0)
        term = np.zeros(plan.count)
        term[valid] = np.log(pjoint[valid] / pm[k][valid])
        dcost_du -= (1.0 / plan.count) * dw[:, l] * term
    dcost_du[~active] = 0.0

    point_grads = (dcost_du * scale_m)[:, np.newaxis] * g[:, 0, :]
    return MetricValueGrad(cost=cost, grad=_param_gradient(t, plan, point_grads))


@dataclass(frozen=True)
class MindConfig:
    """Self-similarity descriptor settings: 6 axis neighbors at one voxel
    offset, 3x3x3 Gaussian-weighted patches."""

    sigma_patch: float = 0.5  # voxels
    patch_radius: int = 1
    variance_floor: float = 1e-6  # relative to the image intensity variance

    def __post_init__(self):
        if self.variance_floor <= 0:
            raise ValidationError("variance_floor must be > 0")
        if self.sigma_patch <= 0 or self.patch_radius < 1:
            raise ValidationError("invalid MIND patch settings")


# Offset order of the descriptor channels: +x, -x, +y, -y, +z, -z.
MIND_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _patch_kernel(cfg: MindConfig) -> np.ndarray:
    r = cfg.patch_radius
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / cfg.sigma_patch) ** 2)
    return k / k.sum()


def _shift_replicated(a: np.ndarray, offset) -> np.ndarray:
    """a evaluated at x + offset with edge replication; offset in (x, y, z)."""
    out = a
    for axis, step in zip((2, 1, 0), offset):  # array axes are (z, y, x)
        if step == 0:
            continue
        out = np.take(out, np.clip(np.arange(out.shape[axis]) + step, 0,
                                   out.shape[axis] - 1), axis=axis)
    return out


def mind_descriptor(v: Volume, cfg: MindConfig = MindConfig(),
                    mask: BodyMask | None = None) -> Volume:
    """Six-channel self-similarity descriptor in (0, 1].

    Exactly invariant under affine intensity remapping (including contrast
    inversion), which is what makes it usable across modalities. The
    variance floor is relative to the intensity variance (in-mask when a
    mask is given).
    """
    _require_single_channel(v, "descriptor input")
    img = v.scalar().astype(np.float64)
    k = _patch_kernel(cfg)

    def smooth(a):
        for axis in (0, 1, 2):
            a = convolve1d(a, k, axis=axis, mode="nearest")
        return a

    dists = np.empty(img.shape + (6,), dtype=np.float64)
    for c, off in enumerate(MIND_OFFSETS):
        diff = img - _shift_replicated(img, off)
        dists[..., c] = smooth(diff * diff)

    ref = img[mask.indicator] if mask is not None else img
    floor = cfg.variance_floor * float(np.var(ref))
    vnorm = np.maximum(dists.mean(axis=-1), max(floor, 1e-300))
    desc = np.exp(-dists / vnorm[..., np.newaxis])
    desc /= desc.max(axis=-1, keepdims=True)
    return v.with_data(desc.astype(np.float32), semantics="feature",
                       element_type="MET_FLOAT")


def _channel_ssd(fixed_feat: Volume, moving_feat: Volume, t: BSplineTransform,
                 plan: SamplePlan) -> MetricValueGrad:
    f = sample_volume(fixed_feat, plan.points)
    warped = t.transform_points(plan.points)
    m, g = sample_with_gradient(moving_feat, warped)
    resid = f - m  # (N, C)
    c = resid.shape[1]
    cost = float(np.mean(resid**2))
    point_grads = (-2.0 / (plan.count * c)) * np.einsum("nc,nck->nk", resid, g)
    return MetricValueGrad(cost=cost, grad=_param_gradient(t, plan, point_grads))


def mind_metric(fixed: Volume, moving: Volume, t: BSplineTransform,
                plan: SamplePlan, cfg: MindConfig = MindConfig(),
                fixed_mask: BodyMask | None = None,
                moving_mask: BodyMask | None = None) -> MetricValueGrad:
    """SSD between precomputed self-similarity descriptors (static mode).

    Descriptors are computed once from the unwarped images; the moving
    descriptor is warped as a 6-channel volume. For repeated evaluation use
    :func:`mind_descriptor` + :func:`feature_ssd_metric` to reuse them.
    """
    df = mind_descriptor(fixed, cfg, fixed_mask)
    dm = mind_descriptor(moving, cfg, moving_mask)
    return _channel_ssd(df, dm, t, plan)


def feature_ssd_metric(fixed_feat: Volume, moving_feat: Volume,
                       t: BSplineTransform, plan: SamplePlan) -> MetricValueGrad:
    """Multi-channel SSD on precomputed feature volumes."""
    if fixed_feat.channels != moving_feat.channels:
        raise ValidationError(
            f"feature channel mismatch: {fixed_feat.channels} vs {moving_feat.channels}"
        )
    return _channel_ssd(fixed_feat, moving_feat, t, plan)


def feature_l1_metric(fixed_feat: Volume, moving_feat: Volume,
                      t: BSplineTransform, plan: SamplePlan,
                      penalty: str = "l1") -> MetricValueGrad:
    """Channel-averaged feature distance in static mode.

    L1 by default; ``penalty="l2"`` switches to squared differences. The
    L1 subgradient uses sign(0) = 0.
    """
    if fixed_feat.channels != moving_feat.channels:
        raise ValidationError(
            f"feature channel mismatch: {fixed_feat.channels} vs {moving_feat.channels}"
        )
    if penalty == "l2":
        return _channel_ssd(fixed_feat, moving_feat, t, plan)
    if penalty != "l1":
        raise ValidationError(f"unknown penalty {penalty!r} (expected l1 or l2)")
    f = sample_volume(fixed_feat, plan.points)
    warped = t.transform_points(plan.points)
    m, g = sample_with_gradient(moving_feat, warped)
    resid = f - m
    c = resid.shape[1]
    cost = float(np.mean(np.abs(resid)))
    sign = np.sign(resid)
    point_grads = (-1.0 / (plan.count * c)) * np.einsum("nc,nck->nk", sign, g)
    return MetricValueGrad(cost=cost, grad=_param_gradient(t, plan, point_grads))
