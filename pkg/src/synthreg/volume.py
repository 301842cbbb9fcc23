"""Voxel-grid foundation: volume container, geometry math, interpolation,
resampling and the Gaussian resolution pyramid.

Conventions
-----------
* ``dims``, ``spacing``, ``origin`` are given in ``(x, y, z)`` order, the
  order the MetaImage header uses.
* The data array is stored C-ordered with shape ``(z, y, x, channels)``, so
  the flat layout is channel-contiguous per voxel with x the fastest spatial
  axis.
* ``world = origin + direction @ (index * spacing)`` with ``index`` the
  continuous ``(x, y, z)`` voxel index and ``direction`` an orthonormal
  index-to-world rotation.
* Out-of-bounds sampling returns a constant background value. When the
  caller does not supply one it defaults per element semantics: -1024 for
  HU, -1 for normalized intensities, 0 otherwise.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d

from .errors import GeometryError, ValidationError

SEMANTICS = ("HU", "normalized", "feature", "label", "probability")

DEFAULT_BACKGROUND = {
    "HU": -1024.0,
    "normalized": -1.0,
    "feature": 0.0,
    "label": 0.0,
    "probability": 0.0,
}

_ORTHONORMAL_TOL = 1e-6

# Worker pool size for voxel-parallel sections; 0 = one worker per CPU.
_max_threads = 0
_pool_lock = threading.Lock()


def set_max_threads(n: int) -> None:
    """Cap the worker pool used by resampling/warping. 0 means auto."""
    global _max_threads
    if n < 0:
        raise ValidationError(f"thread count must be >= 0, got {n}")
    _max_threads = int(n)


def get_max_threads() -> int:
    import os

    if _max_threads > 0:
        return _max_threads
    return os.cpu_count() or 1


def map_slabs(fn, nz: int) -> None:
    """Run ``fn(z0, z1)`` over a partition of ``range(nz)``.

    Each call owns a disjoint z-slab of the output, so results are
    bit-identical regardless of worker count.
    """
    workers = min(get_max_threads(), nz)
    if workers <= 1:
        fn(0, nz)
        return
    bounds = np.linspace(0, nz, workers + 1).astype(int)
    with _pool_lock, ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(fn, int(z0), int(z1))
            for z0, z1 in zip(bounds[:-1], bounds[1:])
            if z1 > z0
        ]
        for f in futures:
            f.result()


@dataclass(frozen=True)
class Geometry:
    """Grid geometry: dims/spacing/origin in (x, y, z) order plus rotation."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    direction: np.ndarray  # (3, 3) orthonormal, index-to-world

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3, 3):
            raise ValidationError(f"direction must be 3x3, got {d.shape}")
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "direction", d)
        if any(v <= 0 for v in self.dims):
            raise ValidationError(f"dims must be positive, got {self.dims}")
        if any(v <= 0 for v in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        if not np.allclose(d.T @ d, np.eye(3), atol=_ORTHONORMAL_TOL):
            raise ValidationError("direction matrix is not orthonormal")
        d.flags.writeable = False

    def index_to_world(self, index) -> np.ndarray:
        """Map continuous (x, y, z) voxel indices to world mm. (N,3) or (3,)."""
        idx = np.asarray(index, dtype=np.float64)
        return idx * np.asarray(self.spacing) @ self.direction.T + np.asarray(self.origin)

    def world_to_index(self, world) -> np.ndarray:
        """Inverse of :meth:`index_to_world`; exact to roundoff."""
        p = np.asarray(world, dtype=np.float64) - np.asarray(self.origin)
        return p @ self.direction / np.asarray(self.spacing)

    def voxel_centers(self, z_slice: slice | None = None) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nz', ny, nx, 3)."""
        nx, ny, nz = self.dims
        zs = np.arange(nz, dtype=np.float64)[z_slice] if z_slice else np.arange(nz, dtype=np.float64)
        ix, iy, iz = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            zs,
            indexing="ij",
        )
        idx = np.stack([ix, iy, iz], axis=-1).transpose(2, 1, 0, 3)  # (z,y,x,3)
        return self.index_to_world(idx.reshape(-1, 3)).reshape(idx.shape)

    def same_grid(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )


@dataclass(frozen=True)
class Volume:
    """Immutable 3D (optionally multi-channel) scalar grid with geometry.

    ``data`` has shape ``(nz, ny, nx, channels)``. The constructor takes
    ownership of the array and marks it read-only; all operations on volumes
    are pure functions returning new instances.
    """

    geometry: Geometry
    data: np.ndarray
    element_semantics: str = "normalized"
    element_type: str = "MET_FLOAT"  # on-disk element type used when writing

    def __post_init__(self):
        arr = np.asarray(self.data)
        nx, ny, nz = self.geometry.dims
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.shape[:3] != (nz, ny, nx):
            raise ValidationError(
                f"data shape {arr.shape} does not match dims {self.geometry.dims} "
                "(expected (z, y, x[, c]))"
            )
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError("volume data contains NaN/Inf")
        if self.element_semantics not in SEMANTICS:
            raise ValidationError(f"unknown element_semantics {self.element_semantics!r}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.geometry.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.geometry.origin

    @property
    def direction(self) -> np.ndarray:
        return self.geometry.direction

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def default_background(self) -> float:
        return DEFAULT_BACKGROUND[self.element_semantics]

    def scalar(self) -> np.ndarray:
        """The (z, y, x) array of a single-channel volume."""
        if self.channels != 1:
            raise ValidationError(f"expected single channel, volume has {self.channels}")
        return self.data[..., 0]

    def with_data(self, data, semantics: str | None = None, element_type: str | None = None) -> "Volume":
        return Volume(
            geometry=self.geometry,
            data=data,
            element_semantics=semantics or self.element_semantics,
            element_type=element_type or self.element_type,
        )

    def with_semantics(self, semantics: str) -> "Volume":
        return replace(self, element_semantics=semantics)


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                direction=None, semantics: str = "normalized",
                element_type: str = "MET_FLOAT") -> Volume:
    """Build a Volume from a (z, y, x[, c]) array; dims derived from shape."""
    arr = np.asarray(data)
    if arr.ndim not in (3, 4):
        raise ValidationError(f"expected 3D or 4D array, got shape {arr.shape}")
    nz, ny, nx = arr.shape[:3]
    geom = Geometry(
        dims=(nx, ny, nz),
        spacing=tuple(spacing),
        origin=tuple(origin),
        direction=np.eye(3) if direction is None else np.asarray(direction, float),
    )
    return Volume(geometry=geom, data=arr, element_semantics=semantics,
                  element_type=element_type)


def sample_volume(v: Volume, points, background: float | None = None) -> np.ndarray:
    """Trilinear interpolation of all channels at world points.

    Args:
        points: (N, 3) world coordinates.
        background: value returned outside the voxel-center hull; defaults
            per element semantics.

    Returns:
        (N, channels) float64 array.
    """
    vals, _ = _interpolate(v, np.asarray(points, np.float64), background, want_gradient=False)
    return vals


def sample_with_gradient(v: Volume, points, background: float | None = None):
    """Trilinear values and their exact spatial gradients at world points.

    The gradient is the derivative of the trilinear interpolant itself
    (world frame, per mm), which makes metric gradients consistent with
    finite differences of the sampled cost. Outside the volume both the
    value (background) and the gradient (0) are constant.

    Returns:
        (values (N, C), gradients (N, C, 3)) float64 arrays.
    """
    return _interpolate(v, np.asarray(points, np.float64), background, want_gradient=True)


def _interpolate(v: Volume, pts: np.ndarray, background: float | None, want_gradient: bool):
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be (N, 3), got {pts.shape}")
    if background is None:
        background = v.default_background()
    nx, ny, nz = v.dims
    n = pts.shape[0]
    c = v.channels
    idx = v.geometry.world_to_index(pts)  # (N,3) in (x,y,z)

    inside = (
        (idx[:, 0] >= 0.0) & (idx[:, 0] <= nx - 1)
        & (idx[:, 1] >= 0.0) & (idx[:, 1] <= ny - 1)
        & (idx[:, 2] >= 0.0) & (idx[:, 2] <= nz - 1)
    )
    vals = np.full((n, c), float(background), dtype=np.float64)
    grads = np.zeros((n, c, 3), dtype=np.float64) if want_gradient else None
    if not inside.any():
        return vals, grads

    pi = idx[inside]
    # Clamp the base cell so points exactly on the far face use t == 1.
    i0 = np.minimum(np.floor(pi).astype(np.int64), np.array([nx, ny, nz]) - 2)
    i0 = np.maximum(i0, 0)
    t = pi - i0  # in [0, 1]

    d = v.data
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    c000 = d[z0, y0, x0].astype(np.float64)
    c100 = d[z0, y0, x1].astype(np.float64)
    c010 = d[z0, y1, x0].astype(np.float64)
    c110 = d[z0, y1, x1].astype(np.float64)
    c001 = d[z1, y0, x0].astype(np.float64)
    c101 = d[z1, y0, x1].astype(np.float64)
    c011 = d[z1, y1, x0].astype(np.float64)
    c111 = d[z1, y1, x1].astype(np.float64)

    tx, ty, tz = t[:, 0:1], t[:, 1:2], t[:, 2:3]

    c00 = c000 + (c100 - c000) * tx
    c10 = c010 + (c110 - c010) * tx
    c01 = c001 + (c101 - c001) * tx
    c11 = c011 + (c111 - c011) * tx
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    vals[inside] = c0 + (c1 - c0) * tz

    if want_gradient:
        # d/dx with y,z interpolated, etc.; then map index-space slopes to world.
        gx = ((c100 - c000) * (1 - ty) + (c110 - c010) * ty) * (1 - tz) \
            + ((c101 - c001) * (1 - ty) + (c111 - c011) * ty) * tz
        gy = (c10 - c00) * (1 - tz) + (c11 - c01) * tz
        gz = c1 - c0
        g_idx = np.stack([gx, gy, gz], axis=-1)  # (M, C, 3) per index unit
        g_idx /= np.asarray(v.spacing, np.float64)
        grads[inside] = g_idx @ v.direction.T
    return vals, grads


def sample_linear(v: Volume, point, background: float | None = None) -> np.ndarray:
    """Trilinear sample of one world point; (channels,) vector."""
    return sample_volume(v, np.asarray(point, np.float64)[np.newaxis, :], background)[0]


def resample(v: Volume, target: Geometry, background: float | None = None) -> Volume:
    """Sample ``v`` at every voxel center of ``target``."""
    nx, ny, nz = target.dims
    out = np.empty((nz, ny, nx, v.channels), dtype=np.float32)

    def run(z0, z1):
        pts = target.voxel_centers(slice(z0, z1)).reshape(-1, 3)
        out[z0:z1] = sample_volume(v, pts, background).reshape(z1 - z0, ny, nx, v.channels)

    map_slabs(run, nz)
    return Volume(geometry=target, data=out, element_semantics=v.element_semantics,
                  element_type=v.element_type)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian, truncated at 3*sigma, renormalized to sum 1."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_gaussian(v: Volume, sigma_voxels: float) -> Volume:
    """Separable Gaussian smoothing in voxel units (edge-replicated)."""
    if sigma_voxels <= 0:
        return v
    k = gaussian_kernel1d(sigma_voxels)
    out = v.data.astype(np.float32)
    for axis in (0, 1, 2):  # z, y, x
        out = convolve1d(out, k, axis=axis, mode="nearest")
    return v.with_data(out)


def gaussian_pyramid(v: Volume, levels: int) -> list[Volume]:
    """Coarse-to-fine stack: level 0 is ``v``; level L is the original
    smoothed with sigma = 2**(L-1) voxels and decimated by 2**L per axis,
    with spacing scaled to preserve world extent.

    Raises:
        ValidationError: volume too small for the requested level count.
    """
    if levels < 1:
        raise ValidationError(f"levels must be >= 1, got {levels}")
    need = 2 ** (levels - 1)
    if any(d < need for d in v.dims):
        raise ValidationError(
            f"volume dims {v.dims} too small for {levels} pyramid levels "
            f"(need >= {need} per axis)"
        )
    out = [v]
    for lvl in range(1, levels):
        step = 2 ** lvl
        smoothed = smooth_gaussian(v, sigma_voxels=2.0 ** (lvl - 1))
        data = smoothed.data[::step, ::step, ::step, :]
        nz, ny, nx = data.shape[:3]
        geom = Geometry(
            dims=(nx, ny, nz),
            spacing=tuple(s * step for s in v.spacing),
            origin=v.origin,
            direction=v.direction,
        )
        out.append(Volume(geometry=geom, data=np.ascontiguousarray(data),
                          element_semantics=v.element_semantics,
                          element_type=v.element_type))
    return out


def require_same_grid(a: Volume, b: Volume, what: str = "volumes") -> None:
    if not a.geometry.same_grid(b.geometry):
        raise GeometryError(f"{what} must share geometry: {a.dims} vs {b.dims}")
