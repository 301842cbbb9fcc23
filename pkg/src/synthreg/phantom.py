"""Synthetic phantom generation and landmark-based registration error.

A phantom is a smooth body ellipsoid in air holding nested structures with
CT-like intensity bands (air about -1000 HU, soft tissue 0-100 HU, bone
700-1500 HU) plus low-amplitude texture, with landmarks placed on
intensity-gradient maxima where registration information lives. Everything
is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import BSplineTransform
from .errors import ValidationError
from .preprocess import BodyMask
from .volume import Volume, make_volume, smooth_gaussian

MIN_LANDMARKS = 200


@dataclass(frozen=True)
class Phantom:
    """Image, body mask, in-mask edge landmarks, optional modality twin."""

    image: Volume
    mask: BodyMask
    landmarks: np.ndarray  # (N, 3) world coordinates
    modality_twin: Volume | None = None

    def __post_init__(self):
        lm = np.ascontiguousarray(np.asarray(self.landmarks, dtype=np.float64))
        if lm.ndim != 2 or lm.shape[1] != 3:
            raise ValidationError(f"landmarks must be (N, 3), got {lm.shape}")
        lm.flags.writeable = False
        object.__setattr__(self, "landmarks", lm)


def _ellipsoid(zz, yy, xx, center, radii):
    return (
        ((xx - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((zz - center[2]) / radii[2]) ** 2
    )


def make_phantom(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), seed: int = 0,
                 n_landmarks: int = MIN_LANDMARKS) -> Phantom:
    """Deterministic CT-like phantom with >= 200 edge landmarks.

    Args:
        dims: (nx, ny, nz), each >= 32.
        spacing: voxel spacing in mm.
    """
    nx, ny, nz = dims
    if min(dims) < 32:
        raise ValidationError(f"phantom dims must be >= 32 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(np.arange(nz, dtype=np.float64),
                             np.arange(ny, dtype=np.float64),
                             np.arange(nx, dtype=np.float64), indexing="ij")

    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    body = _ellipsoid(zz, yy, xx, (cx, cy, cz), (0.42 * nx, 0.40 * ny, 0.45 * nz))

    img = np.full((nz, ny, nx), -1000.0)
    inside = body <= 1.0
    img[inside] = 40.0  # soft-tissue base

    # Low-amplitude smooth texture inside the body.
    noise = rng.normal(0.0, 1.0, size=(nz, ny, nx))
    tex = make_volume(noise.astype(np.float32), spacing=spacing)
    tex = smooth_gaussian(tex, 2.0)
    t = tex.data[..., 0].astype(np.float64)
    t = t / max(np.abs(t).max(), 1e-12)
    img[inside] += 30.0 * t[inside]

    # Bone shell: ellipsoidal ring around an inner soft core.
    shell_outer = _ellipsoid(zz, yy, xx, (cx, cy, cz), (0.30 * nx, 0.28 * ny, 0.32 * nz))
    shell_inner = _ellipsoid(zz, yy, xx, (cx, cy, cz), (0.24 * nx, 0.22 * ny, 0.26 * nz))
    shell = (shell_outer <= 1.0) & (shell_inner > 1.0)
    img[shell] = 1100.0 + 150.0 * t[shell]

    # Bone tube along z, off-center.
    tube = (((xx - cx - 0.22 * nx) / (0.06 * nx)) ** 2
            + ((yy - cy + 0.10 * ny) / (0.06 * ny)) ** 2)
    tube_mask = (tube <= 1.0) & inside
    img[tube_mask] = 900.0 + 100.0 * t[tube_mask]

    # Air cavity inside soft tissue.
    cavity = _ellipsoid(zz, yy, xx, (cx - 0.18 * nx, cy - 0.12 * ny, cz),
                        (0.08 * nx, 0.09 * ny, 0.10 * nz))
    img[(cavity <= 1.0) & inside] = -980.0

    # Soft nodule of a different band.
    nodule = _ellipsoid(zz, yy, xx, (cx + 0.05 * nx, cy + 0.16 * ny, cz + 0.1 * nz),
                        (0.07 * nx, 0.07 * ny, 0.08 * nz))
    img[(nodule <= 1.0) & inside] = 95.0 + 5.0 * t[(nodule <= 1.0) & inside]

    vol = make_volume(img.astype(np.float32), spacing=spacing, semantics="HU",
                      element_type="MET_SHORT")
    vol = smooth_gaussian(vol, 0.8)

    mask = BodyMask(make_volume(inside.astype(np.float32), spacing=spacing,
                                semantics="label", element_type="MET_UCHAR"))
    landmarks = _edge_landmarks(vol, mask, n_landmarks)
    return Phantom(image=vol, mask=mask, landmarks=landmarks)


def _edge_landmarks(v: Volume, mask: BodyMask, count: int) -> np.ndarray:
    """Greedy gradient-magnitude maxima with a minimum mutual separation,
    restricted to the eroded mask interior. Deterministic."""
    img = v.scalar().astype(np.float64)
    gz, gy, gx = np.gradient(img)
    mag = np.sqrt(gx**2 + gy**2 + gz**2)

    interior = mask.indicator.copy()
    interior[:2] = interior[-2:] = False
    interior[:, :2] = interior[:, -2:] = False
    interior[:, :, :2] = interior[:, :, -2:] = False

    mag = np.where(interior, mag, -1.0)
    order = np.argsort(mag, axis=None)[::-1]
    zyx = np.column_stack(np.unravel_index(order, mag.shape))

    min_sep = max(2.0, min(v.dims) / 16.0)  # voxels
    chosen: list[np.ndarray] = []
    for cand in zyx:
        if mag[tuple(cand)] <= 0:
            break
        if chosen:
            d = np.linalg.norm(np.asarray(chosen) - cand, axis=1)
            if d.min() < min_sep:
                continue
        chosen.append(cand)
        if len(chosen) == count:
            break
    if len(chosen) < count:
        raise ValidationError(
            f"could only place {len(chosen)} landmarks (requested {count})")
    idx = np.asarray(chosen, dtype=np.float64)[:, ::-1]  # (z,y,x) -> (x,y,z)
    return v.geometry.index_to_world(idx)


def modality_remap(v: Volume, mode: str = "invert") -> Volume:
    """Strictly monotone intensity remapping simulating a second modality.

    invert: v -> (lo + hi) - v (its own inverse).
    gamma: normalized power curve with exponent 0.5, rescaled to the input
        range (monotone increasing, nonlinear).
    piecewise: monotone increasing three-segment linear map over the range.
    """
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if mode == "invert":
        out = (lo + hi) - data
    elif mode == "gamma":
        if hi == lo:
            out = data.copy()
        else:
            u = (data - lo) / (hi - lo)
            out = lo + (hi - lo) * np.power(u, 0.5)
    elif mode == "piecewise":
        if hi == lo:
            out = data.copy()
        else:
            u = (data - lo) / (hi - lo)
            knots_in = np.array([0.0, 0.3, 0.7, 1.0])
            knots_out = np.array([0.0, 0.55, 0.8, 1.0])
            out = lo + (hi - lo) * np.interp(u, knots_in, knots_out)
    else:
        raise ValidationError(f"unknown remap mode {mode!r}")
    return v.with_data(out.astype(np.float32))


def landmark_tre(t_true: BSplineTransform, t_est: BSplineTransform,
                 landmarks) -> dict:
    """Per-landmark |T_est(x) - T_true(x)| summarized as mean/max/p95 (mm)."""
    lm = np.atleast_2d(np.asarray(landmarks, dtype=np.float64))
    if lm.shape[0] < 1:
        raise ValidationError("need at least one landmark")
    d = np.linalg.norm(t_est.transform_points(lm) - t_true.transform_points(lm),
                       axis=1)
    return {
        "mean": float(d.mean()),
        "max": float(d.max()),
        "p95": float(np.quantile(d, 0.95, method="linear")),
        "per_landmark": d,
    }


def save_landmarks(landmarks: np.ndarray, path: str) -> None:
    """Three world coordinates per line, whitespace-separated."""
    with open(path, "w") as f:
        f.write("# x y z (mm)\n")
        for p in np.atleast_2d(landmarks):
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_landmarks(path: str) -> np.ndarray:
    pts = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ValidationError(f"{path}: line {line_no}: expected 3 values")
            pts.append([float(x) for x in parts])
    if not pts:
        raise ValidationError(f"{path}: no landmarks found")
    return np.asarray(pts, dtype=np.float64)
