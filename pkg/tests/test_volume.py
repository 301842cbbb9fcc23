"""Volume container, coordinate math, interpolation, pyramid."""

import numpy as np
import pytest

from synthreg import (
    Geometry,
    ValidationError,
    gaussian_pyramid,
    make_volume,
    resample,
    sample_linear,
    sample_volume,
    sample_with_gradient,
)
from synthreg.volume import gaussian_kernel1d


def rotation_xyz(ax, ay, az):
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def trilinear_oracle(data, idx, background):
    """Scalar reference interpolator, one point at a time."""
    nz, ny, nx = data.shape
    x, y, z = idx
    if not (0 <= x <= nx - 1 and 0 <= y <= ny - 1 and 0 <= z <= nz - 1):
        return background
    x0 = min(int(np.floor(x)), nx - 2)
    y0 = min(int(np.floor(y)), ny - 2)
    z0 = min(int(np.floor(z)), nz - 2)
    tx, ty, tz = x - x0, y - y0, z - z0
    acc = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = (
                    (tx if dx else 1 - tx)
                    * (ty if dy else 1 - ty)
                    * (tz if dz else 1 - tz)
                )
                acc += w * float(data[z0 + dz, y0 + dy, x0 + dx])
    return acc


def test_world_index_round_trip_rotated():
    rng = np.random.default_rng(7)
    geom = Geometry(
        dims=(9, 11, 7),
        spacing=(0.7, 1.3, 2.5),
        origin=(-12.0, 4.5, 30.0),
        direction=rotation_xyz(0.3, -0.2, 0.9),
    )
    idx = rng.uniform(-5, 15, size=(200, 3))
    back = geom.world_to_index(geom.index_to_world(idx))
    assert np.abs(back - idx).max() < 1e-9


def test_index_to_world_matches_formula():
    d = rotation_xyz(0.1, 0.2, 0.3)
    geom = Geometry(dims=(4, 4, 4), spacing=(2.0, 3.0, 4.0), origin=(1.0, -2.0, 5.0), direction=d)
    idx = np.array([1.5, 2.0, 0.25])
    expect = np.array([1.0, -2.0, 5.0]) + d @ (idx * np.array([2.0, 3.0, 4.0]))
    assert np.allclose(geom.index_to_world(idx), expect, atol=1e-12)


def test_trilinear_matches_oracle():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(6, 7, 8)).astype(np.float32)
    v = make_volume(data, spacing=(1.1, 0.9, 1.4), origin=(3.0, -1.0, 2.0),
                    direction=rotation_xyz(0.2, 0.1, -0.4))
    idx = rng.uniform(-1.5, 9.0, size=(300, 3))
    pts = v.geometry.index_to_world(idx)
    got = sample_volume(v, pts, background=-1.0)[:, 0]
    want = np.array([trilinear_oracle(data.astype(np.float64), i, -1.0) for i in idx])
    assert np.abs(got - want).max() < 1e-5


def test_boundary_faces_are_inside():
    data = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
    v = make_volume(data)
    corners = [(0, 0, 0), (2, 0, 0), (0, 2, 0), (0, 0, 2), (2, 2, 2)]
    pts = v.geometry.index_to_world(np.array(corners, float))
    got = sample_volume(v, pts, background=999.0)[:, 0]
    want = [data[c[2], c[1], c[0]] for c in corners]
    assert np.allclose(got, want)
    just_out = v.geometry.index_to_world(np.array([[2.0001, 1.0, 1.0]]))
    assert sample_volume(v, just_out, background=999.0)[0, 0] == 999.0


def test_background_defaults_follow_semantics():
    data = np.zeros((2, 2, 2), np.float32)
    out = np.array([[-5.0, -5.0, -5.0]])
    assert sample_volume(make_volume(data, semantics="HU"), out)[0, 0] == -1024.0
    assert sample_volume(make_volume(data, semantics="normalized"), out)[0, 0] == -1.0
    assert sample_volume(make_volume(data, semantics="feature"), out)[0, 0] == 0.0


def test_gradient_matches_finite_differences_inside_cells():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)
    v = make_volume(data, spacing=(1.2, 0.8, 1.0), origin=(0.5, 0.0, -2.0),
                    direction=rotation_xyz(-0.3, 0.15, 0.5))
    # Stay strictly interior to one cell so the interpolant is smooth.
    idx = rng.uniform(1.2, 5.8, size=(60, 3))
    pts = v.geometry.index_to_world(idx)
    vals, grads = sample_with_gradient(v, pts)
    h = 1e-5
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fp = sample_volume(v, pts + e)[:, 0]
        fm = sample_volume(v, pts - e)[:, 0]
        fd = (fp - fm) / (2 * h)
        assert np.abs(grads[:, 0, axis] - fd).max() < 1e-5


def test_gradient_zero_outside():
    v = make_volume(np.ones((3, 3, 3), np.float32))
    _, g = sample_with_gradient(v, np.array([[-4.0, 0.0, 0.0]]))
    assert np.all(g == 0.0)


def test_gradient_exact_for_trilinear_field():
    # f(x,y,z) = 2 + 3x - y + 0.5z + xy is reproduced exactly by trilinear
    # interpolation, so sampled gradients must equal the true ones.
    nx, ny, nz = 5, 6, 4
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    f = 2 + 3 * xx - yy + 0.5 * zz + xx * yy
    v = make_volume(f.astype(np.float32), spacing=(2.0, 2.0, 2.0))
    rng = np.random.default_rng(5)
    idx = rng.uniform(0.6, 2.4, size=(40, 3))
    pts = v.geometry.index_to_world(idx)
    _, g = sample_with_gradient(v, pts)
    # d/dworld = d/dindex / spacing
    want = np.stack([(3 + idx[:, 1]) / 2.0, (-1 + idx[:, 0]) / 2.0, np.full(40, 0.25)], axis=1)
    assert np.abs(g[:, 0, :] - want).max() < 2e-5


def test_sample_linear_single_point():
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    v = make_volume(data)
    center = v.geometry.index_to_world(np.array([0.5, 0.5, 0.5]))
    assert abs(sample_linear(v, center)[0] - data.mean()) < 1e-6


def test_volume_is_immutable():
    data = np.zeros((2, 2, 2), np.float32)
    v = make_volume(data)
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0


def test_volume_rejects_nan():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        make_volume(data)


def test_resample_identity_grid_is_exact():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(5, 6, 7)).astype(np.float32)
    v = make_volume(data, spacing=(1.5, 1.0, 2.0), origin=(4.0, 5.0, 6.0))
    out = resample(v, v.geometry)
    assert np.abs(out.data - v.data).max() < 1e-6


def gaussian_smooth_oracle(data, sigma):
    """Edge-padded separable convolution using only numpy primitives."""
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    out = data.astype(np.float64)
    for axis in range(3):
        moved = np.moveaxis(out, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(r, r)], mode="edge")
        res = np.empty_like(moved)
        for i in np.ndindex(moved.shape[:-1]):
            res[i] = np.convolve(padded[i], k[::-1], mode="valid")
        out = np.moveaxis(res, -1, axis)
    return out


def test_pyramid_level1_matches_dense_oracle():
    rng = np.random.default_rng(13)
    data = rng.normal(size=(8, 10, 12)).astype(np.float32)
    v = make_volume(data, spacing=(1.0, 1.5, 2.0), origin=(3.0, 2.0, 1.0))
    levels = gaussian_pyramid(v, 2)
    want = gaussian_smooth_oracle(data, 1.0)[::2, ::2, ::2]
    got = levels[1].data[..., 0]
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-5


def test_pyramid_geometry():
    v = make_volume(np.zeros((16, 16, 16), np.float32), spacing=(1.0, 2.0, 0.5),
                    origin=(7.0, 8.0, 9.0))
    levels = gaussian_pyramid(v, 3)
    assert levels[0] is v
    assert levels[1].spacing == (2.0, 4.0, 1.0)
    assert levels[2].spacing == (4.0, 8.0, 2.0)
    assert levels[2].dims == (4, 4, 4)
    for lv in levels:
        assert lv.origin == v.origin
        # Decimated voxel (1,1,1) sits at the same world point as the
        # original voxel (step, step, step).
        w = lv.geometry.index_to_world(np.array([1.0, 1.0, 1.0]))
        step = lv.spacing[0] / v.spacing[0]
        w0 = v.geometry.index_to_world(np.array([step, step, step]))
        assert np.allclose(w, w0)


def test_pyramid_too_small_raises():
    v = make_volume(np.zeros((3, 16, 16), np.float32))
    with pytest.raises(ValidationError):
        gaussian_pyramid(v, 3)


def test_kernel_normalized_and_symmetric():
    for sigma in (0.5, 1.0, 2.0, 3.7):
        k = gaussian_kernel1d(sigma)
        assert abs(k.sum() - 1.0) < 1e-12
        assert np.allclose(k, k[::-1])
        assert len(k) == 2 * max(1, int(np.ceil(3 * sigma))) + 1
