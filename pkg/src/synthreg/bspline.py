"""Cubic B-spline free-form deformation.

Displacements live in world coordinates (mm): the transform maps a world
point p to p + u(p) where u is a tensor-product cubic B-spline over a
regular control-point grid. Coefficient storage follows the Elastix
parameter convention (all x-components first, then y, then z; control
points enumerated x-fastest), so published parameter files load without
any permutation. Outside the grid's basis support the displacement is
zero and the transform continues as the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import FoldingRiskError, ValidationError
from .volume import Geometry, Volume, map_slabs, sample_volume

TRANSFORM_FORMAT_VERSION = 1

# Dyadic subdivision stencil of the uniform cubic B-spline.
_SUBDIVISION = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 8.0


def bspline_weights(t) -> np.ndarray:
    """Cubic B-spline basis values for offsets -1..2 around floor(x).

    Args:
        t: fractional coordinate(s) in [0, 1]; scalar or array.

    Returns:
        (..., 4) weights; each row sums to 1.
    """
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    w0 = s * s * s / 6.0
    w1 = (3.0 * t**3 - 6.0 * t**2 + 4.0) / 6.0
    w2 = (-3.0 * t**3 + 3.0 * t**2 + 3.0 * t + 1.0) / 6.0
    w3 = t**3 / 6.0
    return np.stack([w0, w1, w2, w3], axis=-1)


def bspline_weight_derivs(t) -> np.ndarray:
    """Derivatives of :func:`bspline_weights` wrt t; rows sum to 0."""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    d0 = -s * s / 2.0
    d1 = (3.0 * t**2 - 4.0 * t) / 2.0
    d2 = (-3.0 * t**2 + 2.0 * t + 1.0) / 2.0
    d3 = t * t / 2.0
    return np.stack([d0, d1, d2, d3], axis=-1)


@dataclass(frozen=True)
class BSplineTransform:
    """Free-form deformation on a regular control-point grid.

    ``coefficients`` has shape (n_control_points, 3) with control point id
    ``ix + nx*(iy + ny*iz)``; immutable after construction.
    """

    grid_dims: tuple[int, int, int]
    grid_spacing: tuple[float, float, float]
    grid_origin: tuple[float, float, float]
    grid_direction: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        if any(d < 4 for d in dims):
            raise ValidationError(f"grid needs >= 4 control points per axis, got {dims}")
        spacing = tuple(float(s) for s in self.grid_spacing)
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"grid spacing must be positive, got {spacing}")
        d = np.asarray(self.grid_direction, dtype=np.float64)
        if d.shape != (3, 3) or not np.allclose(d.T @ d, np.eye(3), atol=1e-6):
            raise ValidationError("grid direction must be 3x3 orthonormal")
        coef = np.ascontiguousarray(np.asarray(self.coefficients, dtype=np.float64))
        n = dims[0] * dims[1] * dims[2]
        if coef.shape != (n, 3):
            raise ValidationError(
                f"coefficients shape {coef.shape} does not match grid {dims} (expected ({n}, 3))"
            )
        if not np.isfinite(coef).all():
            raise ValidationError("coefficients contain NaN/Inf")
        d.flags.writeable = False
        coef.flags.writeable = False
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "grid_spacing", spacing)
        object.__setattr__(self, "grid_origin", tuple(float(o) for o in self.grid_origin))
        object.__setattr__(self, "grid_direction", d)
        object.__setattr__(self, "coefficients", coef)

    @property
    def n_control_points(self) -> int:
        nx, ny, nz = self.grid_dims
        return nx * ny * nz

    @classmethod
    def from_flat_parameters(cls, grid_dims, grid_spacing, grid_origin,
                             grid_direction, params) -> "BSplineTransform":
        """Build from Elastix-ordered parameters: all x, then all y, then z."""
        p = np.asarray(params, dtype=np.float64).ravel()
        n = int(np.prod(grid_dims))
        if p.size != 3 * n:
            raise ValidationError(
                f"expected {3 * n} parameters for grid {tuple(grid_dims)}, got {p.size}"
            )
        return cls(tuple(grid_dims), tuple(grid_spacing), tuple(grid_origin),
                   grid_direction, p.reshape(3, n).T)

    def flat_parameters(self) -> np.ndarray:
        """Elastix-ordered flat view: all x-components, then y, then z."""
        return self.coefficients.T.reshape(-1).copy()

    def with_coefficients(self, coef) -> "BSplineTransform":
        return BSplineTransform(self.grid_dims, self.grid_spacing, self.grid_origin,
                                self.grid_direction, coef)

    def grid_coords(self, points: np.ndarray) -> np.ndarray:
        """World points -> continuous control-grid indices, (N, 3)."""
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.grid_origin)
        return p @ self.grid_direction / np.asarray(self.grid_spacing)

    def displacement(self, points) -> np.ndarray:
        """u(p) for (N, 3) world points; zero where support is absent."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = self.grid_coords(pts)
        i0 = np.floor(g).astype(np.int64)
        t = g - i0
        wx = bspline_weights(t[:, 0])
        wy = bspline_weights(t[:, 1])
        wz = bspline_weights(t[:, 2])
        nx, ny, nz = self.grid_dims
        u = np.zeros_like(pts)
        for lz in range(4):
            cz = i0[:, 2] + (lz - 1)
            okz = (cz >= 0) & (cz < nz)
            for ly in range(4):
                cy = i0[:, 1] + (ly - 1)
                oky = okz & (cy >= 0) & (cy < ny)
                wyz = wy[:, ly] * wz[:, lz]
                for lx in range(4):
                    cx = i0[:, 0] + (lx - 1)
                    ok = oky & (cx >= 0) & (cx < nx)
                    if not ok.any():
                        continue
                    cid = cx[ok] + nx * (cy[ok] + ny * cz[ok])
                    w = (wx[ok, lx] * wyz[ok])[:, np.newaxis]
                    u[ok] += w * self.coefficients[cid]
        return u

    def transform_points(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts + self.displacement(pts)

    def transform_point(self, point) -> np.ndarray:
        return self.transform_points(np.asarray(point)[np.newaxis, :])[0]

    def jacobian_params(self, point) -> dict[int, float]:
        """Basis weight per supporting control point: dT(p)/dc_k = w_k * I.

        Returns an empty map when the point lies outside all basis support.
        """
        g = self.grid_coords(np.asarray(point, dtype=np.float64)[np.newaxis, :])[0]
        i0 = np.floor(g).astype(np.int64)
        t = g - i0
        wx, wy, wz = bspline_weights(t[0]), bspline_weights(t[1]), bspline_weights(t[2])
        nx, ny, nz = self.grid_dims
        out: dict[int, float] = {}
        for lz in range(4):
            cz = i0[2] + lz - 1
            if not 0 <= cz < nz:
                continue
            for ly in range(4):
                cy = i0[1] + ly - 1
                if not 0 <= cy < ny:
                    continue
                for lx in range(4):
                    cx = i0[0] + lx - 1
                    if not 0 <= cx < nx:
                        continue
                    w = float(wx[lx] * wy[ly] * wz[lz])
                    if w != 0.0:
                        out[int(cx + nx * (cy + ny * cz))] = w
        return out

    def support_weights(self, points: np.ndarray):
        """Vectorized sparse basis table for a batch of points.

        Returns:
            (ids (N, 64) int64, weights (N, 64) float64); absent control
            points carry id -1 and weight 0.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = self.grid_coords(pts)
        i0 = np.floor(g).astype(np.int64)
        t = g - i0
        wx = bspline_weights(t[:, 0])
        wy = bspline_weights(t[:, 1])
        wz = bspline_weights(t[:, 2])
        nx, ny, nz = self.grid_dims
        n = pts.shape[0]
        ids = np.full((n, 64), -1, dtype=np.int64)
        wts = np.zeros((n, 64), dtype=np.float64)
        k = 0
        for lz in range(4):
            cz = i0[:, 2] + (lz - 1)
            for ly in range(4):
                cy = i0[:, 1] + (ly - 1)
                wyz = wy[:, ly] * wz[:, lz]
                for lx in range(4):
                    cx = i0[:, 0] + (lx - 1)
                    ok = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny) & (cz >= 0) & (cz < nz)
                    ids[ok, k] = cx[ok] + nx * (cy[ok] + ny * cz[ok])
                    wts[ok, k] = wx[ok, lx] * wyz[ok]
                    k += 1
        return ids, wts

    def spatial_jacobian(self, points) -> np.ndarray:
        """d(T(p))/dp, shape (N, 3, 3): identity plus the displacement Jacobian."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = self.grid_coords(pts)
        i0 = np.floor(g).astype(np.int64)
        t = g - i0
        w = [bspline_weights(t[:, a]) for a in range(3)]
        d = [bspline_weight_derivs(t[:, a]) for a in range(3)]
        nx, ny, nz = self.grid_dims
        du_dg = np.zeros((pts.shape[0], 3, 3))  # d u / d grid-coordinate
        for lz in range(4):
            cz = i0[:, 2] + (lz - 1)
            okz = (cz >= 0) & (cz < nz)
            for ly in range(4):
                cy = i0[:, 1] + (ly - 1)
                oky = okz & (cy >= 0) & (cy < ny)
                for lx in range(4):
                    cx = i0[:, 0] + (lx - 1)
                    ok = oky & (cx >= 0) & (cx < nx)
                    if not ok.any():
                        continue
                    cid = cx[ok] + nx * (cy[ok] + ny * cz[ok])
                    c = self.coefficients[cid]  # (M, 3)
                    gx = d[0][ok, lx] * w[1][ok, ly] * w[2][ok, lz]
                    gy = w[0][ok, lx] * d[1][ok, ly] * w[2][ok, lz]
                    gz = w[0][ok, lx] * w[1][ok, ly] * d[2][ok, lz]
                    grad = np.stack([gx, gy, gz], axis=-1)  # (M, 3)
                    du_dg[ok] += c[:, :, np.newaxis] * grad[:, np.newaxis, :]
        # Chain rule grid->world: dg/dp = direction / spacing per column.
        dg_dp = (self.grid_direction / np.asarray(self.grid_spacing)[:, np.newaxis]).T
        return np.eye(3) + du_dg @ dg_dp.T


@dataclass(frozen=True)
class DeformationSpec:
    """Parameters of the synthetic deformation generator."""

    max_amplitude: float
    seed: int
    grid_spacing: float

    def __post_init__(self):
        if self.max_amplitude < 0:
            raise ValidationError("max_amplitude must be >= 0")
        if self.grid_spacing <= 0:
            raise ValidationError("grid_spacing must be > 0")


def make_grid_for_domain(domain: Geometry, grid_spacing) -> BSplineTransform:
    """Zero-coefficient grid covering the domain plus a one-point margin.

    The grid inherits the domain's direction; the number of cells per axis
    is ceil(extent / spacing), and the leftover slack is split evenly so
    the grid stays centred on the image.
    """
    spacing = np.broadcast_to(np.asarray(grid_spacing, dtype=np.float64), (3,)).copy()
    if np.any(spacing <= 0):
        raise ValidationError(f"grid spacing must be positive, got {grid_spacing}")
    ext = (np.asarray(domain.dims, dtype=np.float64) - 1.0) * np.asarray(domain.spacing)
    cells = np.maximum(1, np.ceil(ext / spacing - 1e-9)).astype(int)
    dims = cells + 3
    slack = cells * spacing - ext
    lo = -spacing - slack / 2.0  # grid coord 0 in the domain's direction frame
    origin = np.asarray(domain.origin) + domain.direction @ lo
    n = int(np.prod(dims))
    return BSplineTransform(tuple(dims), tuple(spacing), tuple(origin),
                            domain.direction, np.zeros((n, 3)))


def refine_dyadic(t: BSplineTransform) -> BSplineTransform:
    """Halve the grid spacing, preserving the displacement field exactly
    (within roundoff) over the previous grid's full-support region.

    Each axis grows from n to 2n-3 control points via the dyadic
    subdivision stencil (1, 4, 6, 4, 1)/8 on the zero-stuffed sequence.
    """
    nx, ny, nz = t.grid_dims
    coef = t.coefficients.reshape(nz, ny, nx, 3)  # id = ix + nx*(iy + ny*iz)

    def refine_axis(arr, axis):
        n = arr.shape[axis]
        shape = list(arr.shape)
        shape[axis] = 2 * n - 1
        stuffed = np.zeros(shape, dtype=np.float64)
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(0, None, 2)
        stuffed[tuple(sl)] = arr
        out = convolve1d(stuffed, _SUBDIVISION, axis=axis, mode="constant", cval=0.0)
        sl[axis] = slice(1, 2 * n - 2)
        return out[tuple(sl)]

    for axis in (0, 1, 2):
        coef = refine_axis(coef, axis)

    new_dims = (2 * nx - 3, 2 * ny - 3, 2 * nz - 3)
    half = np.asarray(t.grid_spacing) / 2.0
    origin = np.asarray(t.grid_origin) + t.grid_direction @ half
    return BSplineTransform(new_dims, tuple(half), tuple(origin), t.grid_direction,
                            coef.reshape(-1, 3))


def random_deformation(domain: Geometry, spec: DeformationSpec) -> BSplineTransform:
    """Seeded uniform coefficients in [-A, A]^3 on a fresh grid.

    The amplitude guard A < 0.4 * grid_spacing is a conservative
    sufficient condition against folding; the sampled spatial Jacobian
    determinant is verified positive as a backstop.
    """
    if spec.max_amplitude >= 0.4 * spec.grid_spacing:
        raise FoldingRiskError(
            f"amplitude {spec.max_amplitude} mm risks folding on a "
            f"{spec.grid_spacing} mm grid (limit {0.4 * spec.grid_spacing:.3g} mm)"
        )
    t = make_grid_for_domain(domain, spec.grid_spacing)
    rng = np.random.default_rng(spec.seed)
    coef = rng.uniform(-spec.max_amplitude, spec.max_amplitude,
                       size=(t.n_control_points, 3))
    t = t.with_coefficients(coef)
    if spec.max_amplitude > 0:
        det = sampled_jacobian_determinants(t)
        if det.min() <= 0:
            raise FoldingRiskError(
                f"sampled Jacobian determinant reached {det.min():.4g}"
            )
    return t


def sampled_jacobian_determinants(t: BSplineTransform, per_cell: int = 3) -> np.ndarray:
    """Determinants of the spatial Jacobian on a per-cell sample lattice
    spanning the full-support region of the grid."""
    nx, ny, nz = t.grid_dims
    axes = []
    for n in (nx, ny, nz):
        cells = n - 3  # full-support cells [1, n-2]
        offs = (np.arange(per_cell) + 0.5) / per_cell
        axes.append((1.0 + (np.arange(cells)[:, None] + offs[None, :]).ravel()))
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    g = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    pts = (g * np.asarray(t.grid_spacing)) @ t.grid_direction.T + np.asarray(t.grid_origin)
    jac = t.spatial_jacobian(pts)
    return np.linalg.det(jac)


def warp_volume(v: Volume, t: BSplineTransform, target: Geometry | None = None,
                background: float | None = None) -> Volume:
    """Pull-back warp: output voxel at x takes the value of v at T(x)."""
    geom = target or v.geometry
    nx, ny, nz = geom.dims
    out = np.empty((nz, ny, nx, v.channels), dtype=np.float32)

    def run(z0, z1):
        pts = geom.voxel_centers(slice(z0, z1)).reshape(-1, 3)
        warped = t.transform_points(pts)
        out[z0:z1] = sample_volume(v, warped, background).reshape(
            z1 - z0, ny, nx, v.channels
        )

    map_slabs(run, nz)
    return Volume(geometry=geom, data=out, element_semantics=v.element_semantics,
                  element_type=v.element_type)


def save_transform_json(t: BSplineTransform, path: str) -> None:
    """Native single-document format; coefficients flat in the documented
    all-x/all-y/all-z order."""
    doc = {
        "format_version": TRANSFORM_FORMAT_VERSION,
        "grid_dims": list(t.grid_dims),
        "grid_spacing": list(t.grid_spacing),
        "grid_origin": list(t.grid_origin),
        "grid_direction": t.grid_direction.reshape(-1).tolist(),
        "coefficients": t.flat_parameters().tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_transform_json(path: str) -> BSplineTransform:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: not valid JSON: {e}")
    try:
        version = doc["format_version"]
        if version != TRANSFORM_FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format_version {version}")
        return BSplineTransform.from_flat_parameters(
            doc["grid_dims"], doc["grid_spacing"], doc["grid_origin"],
            np.asarray(doc["grid_direction"], dtype=np.float64).reshape(3, 3),
            doc["coefficients"],
        )
    except KeyError as e:
        raise ValidationError(f"{path}: missing field {e}")
