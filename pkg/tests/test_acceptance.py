"""End-to-end acceptance gates.

One test per shipping criterion; each records a PASS/FAIL line (printed in
the terminal summary) with the measured numbers next to the threshold it
had to meet. The expensive registration benchmarks share module-scoped
fixtures so each deformable problem is solved once.
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import ndimage

from test_evaluation import _hd95_oracle, _ssim_oracle_single_scale, _surface_oracle
from test_similarity import (
    check_gradient,
    drop_samples_near_cell_faces,
    interior_mask_for,
    small_transform,
    trig_features,
)

from synthreg.bspline import (
    DeformationSpec,
    make_grid_for_domain,
    random_deformation,
    warp_volume,
)
from synthreg.elastix import parse_elastix_transform, write_elastix_transform
from synthreg.ensemble import FlipSpec, flip, fold_ensemble, tta_average
from synthreg.evaluation import aggregate_regions, dice, hd95, mae, ms_ssim, psnr
from synthreg.phantom import landmark_tre, make_phantom, modality_remap
from synthreg.preprocess import (
    BodyMask,
    percentile,
    preprocess_cbct,
    preprocess_ct,
    preprocess_mri,
)
from synthreg.registration import RegistrationConfig, register
from synthreg.similarity import (
    MattesConfig,
    feature_l1_metric,
    mattes_mi_metric,
    mind_metric,
    mse_metric,
    plan_uniform_random,
)
from synthreg.volume import make_volume, set_max_threads


# ------------------------------------------------------------------ shared
# One deformable benchmark problem reused across the registration gates:
# a 64-cube 2 mm phantom warped by a known smooth deformation.


@pytest.fixture(scope="module")
def bench():
    ph = make_phantom((64, 64, 64), (2.0, 2.0, 2.0), seed=7)
    t_true = random_deformation(ph.image.geometry, DeformationSpec(
        max_amplitude=6.0, seed=7, grid_spacing=40.0))
    fixed = warp_volume(ph.image, t_true)
    ident = t_true.with_coefficients(np.zeros_like(t_true.coefficients))
    initial = landmark_tre(t_true, ident, ph.landmarks)["mean"]
    return SimpleNamespace(ph=ph, t_true=t_true, fixed=fixed, initial=initial)


def _timed_register(bench_ns, moving, metric, iters, features=None):
    cfg = RegistrationConfig(metric=metric, max_iters_per_level=iters, seed=42)
    t0 = time.perf_counter()
    res = register(bench_ns.fixed, moving, bench_ns.ph.mask, cfg,
                   features=features)
    elapsed = time.perf_counter() - t0
    tre = landmark_tre(bench_ns.t_true, res.transform,
                       bench_ns.ph.landmarks)["mean"]
    return tre, elapsed


@pytest.fixture(scope="module")
def twin_runs(bench):
    """MSE, MIND, and Mattes-MI solves of the contrast-inverted pair."""
    twin = modality_remap(bench.ph.image, "invert")
    runs = {m: _timed_register(bench, twin, m, 200)
            for m in ("mse", "mind", "nmi")}
    return twin, runs


# ------------------------------------------------- criterion: aggregation

# Reference cross-region summaries: per-region means (AB, HN, TH) and the
# pooled value each must reproduce at 2-decimal display precision.
AGGREGATION_CASES = [
    ("mae", (64.89, 65.15, 60.07), 63.37),
    ("mae", (54.80, 70.07, 55.97), 60.28),
    ("mae", (58.46, 60.97, 50.40), 56.61),
    ("mae", (49.70, 51.97, 44.04), 48.57),
    ("psnr", (29.10, 30.20, 30.76), 30.02),
    ("psnr", (30.97, 29.18, 31.43), 30.53),
    ("psnr", (31.33, 30.38, 31.78), 31.16),
    ("psnr", (32.09, 31.95, 31.43), 31.82),
    ("ms_ssim", (0.91, 0.94, 0.94), 0.93),
    ("ms_ssim", (0.91, 0.95, 0.95), 0.94),
    ("ms_ssim", (0.90, 0.94, 0.92), 0.92),
    ("ms_ssim", (0.91, 0.96, 0.95), 0.94),
]


def test_regional_mean_aggregation(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    hits = 0
    for name, (ab, hn, th), pooled in AGGREGATION_CASES:
        rep = aggregate_regions({"AB": {name: ab}, "HN": {name: hn},
                                 "TH": {name: th}})
        err = abs(rep.aggregated[name] - pooled)
        worst = max(worst, err)
        hits += err <= 0.005 and rep.display()[name] == pooled
    elapsed = time.perf_counter() - t0
    acceptance(
        "table-aggregation",
        hits == len(AGGREGATION_CASES) and elapsed < 1.0,
        f"{hits}/{len(AGGREGATION_CASES)} columns within 0.005 "
        f"(worst {worst:.4f}), {elapsed:.2f} s")


# ----------------------------------------------- criterion: metric oracles


def _mae_psnr_loop(g, p, m, data_range=4095.0):
    diffs = []
    sq = []
    for z in range(g.shape[0]):
        for y in range(g.shape[1]):
            for x in range(g.shape[2]):
                if m[z, y, x]:
                    d = float(g[z, y, x]) - float(p[z, y, x])
                    diffs.append(abs(d))
                    sq.append(d * d)
    mse = math.fsum(sq) / len(sq)
    mae_val = math.fsum(diffs) / len(diffs)
    psnr_val = math.inf if mse == 0 else 10.0 * math.log10(data_range**2 / mse)
    return mae_val, psnr_val


def _dice_loop(a, b):
    inter = na = nb = 0
    for z in range(a.shape[0]):
        for y in range(a.shape[1]):
            for x in range(a.shape[2]):
                va, vb = a[z, y, x], b[z, y, x]
                na += va
                nb += vb
                inter += va and vb
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def _random_spheres(rng, shape):
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=float) for s in shape),
                             indexing="ij")
    out = np.zeros(shape, np.float32)
    for _ in range(rng.integers(1, 3)):
        c = rng.uniform(2, np.asarray(shape) - 2)
        r = rng.uniform(1.5, 3.5)
        out[(zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r] = 1.0
    return out


def test_metric_oracles(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    shape = (16, 16, 16)
    checks = []

    worst_rel = 0.0
    for _ in range(100):
        g64 = rng.normal(0.0, 400.0, shape)
        p64 = g64 + rng.normal(0.0, 60.0, shape)
        m = rng.random(shape) > rng.uniform(0.2, 0.5)
        m[0, 0, 0] = True
        gv = make_volume(g64.astype(np.float32), spacing=(1, 1, 1), semantics="HU")
        pv = make_volume(p64.astype(np.float32), spacing=(1, 1, 1), semantics="HU")
        mask = BodyMask(make_volume(m.astype(np.float32), spacing=(1, 1, 1),
                                    semantics="label"))
        want_mae, want_psnr = _mae_psnr_loop(gv.scalar(), pv.scalar(), m)
        got_mae = mae(gv, pv, mask)
        got_psnr = psnr(gv, pv, mask)
        worst_rel = max(worst_rel,
                        abs(got_mae - want_mae) / want_mae,
                        abs(got_psnr - want_psnr) / abs(want_psnr))

        la = _random_spheres(rng, shape)
        lb = _random_spheres(rng, shape)
        av = make_volume(la, spacing=(1, 1, 1), semantics="label")
        bv = make_volume(lb, spacing=(1, 1, 1), semantics="label")
        if dice(av, bv) != _dice_loop(la.astype(bool), lb.astype(bool)):
            checks.append("dice mismatch")
    checks.append(None if worst_rel < 1e-12 else
                  f"mae/psnr rel err {worst_rel:.2e}")

    worst_hd = 0.0
    done = 0
    while done < 50:
        dims = tuple(int(d) for d in rng.integers(6, 13, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.8, 2.2, size=3))
        la = _random_spheres(rng, dims[::-1])
        lb = _random_spheres(rng, dims[::-1])
        if not (la.any() and lb.any()):
            continue
        done += 1
        av = make_volume(la, spacing=spacing, semantics="label")
        bv = make_volume(lb, spacing=spacing, semantics="label")
        want = _hd95_oracle(av, bv, spacing)
        worst_hd = max(worst_hd, abs(hd95(av, bv) - want))
    checks.append(None if worst_hd <= 1e-6 else f"hd95 err {worst_hd:.2e} mm")

    ph = make_phantom((32, 32, 32), (1.0, 1.0, 1.0), seed=4)
    self_gap = abs(ms_ssim(ph.image, ph.image, ph.mask) - 1.0)
    checks.append(None if self_gap <= 1e-9 else f"self-identity gap {self_gap:.2e}")
    noisy = make_volume(
        (ph.image.scalar() + rng.normal(0, 60, ph.image.data.shape[:3])
         ).astype(np.float32), spacing=ph.image.spacing, semantics="HU")
    gap = abs(ms_ssim(ph.image, noisy, ph.mask, scales=1)
              - _ssim_oracle_single_scale(ph.image, noisy, ph.mask, 4095.0))
    checks.append(None if gap <= 1e-6 else f"single-scale gap {gap:.2e}")

    elapsed = time.perf_counter() - t0
    fails = [c for c in checks if c]
    acceptance(
        "metric-oracles",
        not fails and elapsed < 60.0,
        f"mae/psnr rel {worst_rel:.1e}, hd95 {worst_hd:.1e} mm, "
        f"ssim self {self_gap:.1e}, windowed {gap:.1e}; {elapsed:.1f} s"
        + ("" if not fails else f"; FAILING: {fails}"))


# ------------------------------------------- criterion: gradient FD checks


def test_metric_gradients_match_finite_differences(acceptance):
    t0 = time.perf_counter()
    ph = make_phantom((32, 32, 32), (2.0, 2.0, 2.0), seed=5)
    fixed = ph.image
    moving = modality_remap(ph.image, "gamma")
    t = small_transform(fixed, grid_spacing=16.0, amplitude=0.8, seed=6)
    interior = interior_mask_for(fixed)

    mcfg = MattesConfig(
        fixed_range=(float(fixed.data.min()), float(fixed.data.max())),
        moving_range=(float(moving.data.min()), float(moving.data.max())))
    feats_m = trig_features(fixed, [0.0, 0.9, 1.7, 2.4, 3.3, 4.1])
    feats_f = feats_m.with_data(feats_m.data + 0.75)

    cases = [
        ("mse", 1e-4,
         lambda tt, plan: mse_metric(fixed, moving, tt, plan), moving),
        ("nmi", 1e-2,
         lambda tt, plan: mattes_mi_metric(fixed, moving, tt, plan, mcfg),
         moving),
        ("mind", 1e-3,
         lambda tt, plan: mind_metric(fixed, moving, tt, plan), moving),
        ("feat", 1e-3,
         lambda tt, plan: feature_l1_metric(feats_f, feats_m, tt, plan),
         feats_m),
    ]
    failures = []
    for name, rtol, metric, sampled in cases:
        plan = drop_samples_near_cell_faces(
            plan_uniform_random(interior, 3000, seed=20), sampled, t)
        try:
            check_gradient(lambda tt: metric(tt, plan), t, rtol=rtol, n=20)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    elapsed = time.perf_counter() - t0
    acceptance(
        "gradient-correctness",
        not failures and elapsed < 300.0,
        f"20 coefficients per metric at rtol 1e-4/1e-2/1e-3/1e-3, "
        f"{elapsed:.1f} s" + ("" if not failures else f"; {failures}"))


# ------------------------------------------- criterion: monomodal recovery


def test_monomodal_recovery(bench, acceptance):
    tre, elapsed = _timed_register(bench, bench.ph.image, "mse", 500)
    acceptance(
        "monomodal-recovery",
        tre < 1.0 and tre < 0.20 * bench.initial and elapsed < 120.0,
        f"TRE {tre:.3f} mm (< 1.0 and < 20% of initial {bench.initial:.3f}), "
        f"{elapsed:.1f} s")


# ------------------------------------------ criterion: multimodal premise


def test_multimodal_premise(bench, twin_runs, acceptance):
    _, runs = twin_runs
    mse_tre, mse_s = runs["mse"]
    mind_tre, mind_s = runs["mind"]
    nmi_tre, nmi_s = runs["nmi"]
    total = mse_s + mind_s + nmi_s
    ok = (mse_tre >= 0.80 * bench.initial and mind_tre < 2.0
          and nmi_tre < 2.5 and total < 360.0)
    acceptance(
        "multimodal-premise",
        ok,
        f"inverted pair: MSE TRE {mse_tre:.2f} mm (>= 80% of "
        f"{bench.initial:.2f}), MIND {mind_tre:.2f} (< 2.0), "
        f"MattesMI {nmi_tre:.2f} (< 2.5); {total:.0f} s")


# ------------------------------------------ criterion: feature equivalence


def _offset_difference_features(v):
    """Six smoothed squared one-voxel differences (+-x, +-y, +-z), scaled
    by their mean: unsigned local structure, stable under the intensity
    inversion used by the synthetic twin."""
    data = v.scalar().astype(np.float64)
    chans = []
    for axis, shift in ((2, 1), (2, -1), (1, 1), (1, -1), (0, 1), (0, -1)):
        n = data.shape[axis]
        idx = np.clip(np.arange(n) + shift, 0, n - 1)
        d = np.take(data, idx, axis=axis) - data
        chans.append(ndimage.gaussian_filter(d * d, 0.5))
    s = np.stack(chans, axis=-1)
    s /= s.mean() + 1e-12
    return make_volume(s.astype(np.float32), spacing=v.spacing,
                       origin=v.origin, semantics="feature")


def test_feature_metric_matches_mind(bench, twin_runs, acceptance):
    twin, runs = twin_runs
    mind_tre = runs["mind"][0]
    ff = _offset_difference_features(bench.fixed)
    mf = _offset_difference_features(twin)
    tre, elapsed = _timed_register(bench, twin, "feat", 200, features=(ff, mf))
    acceptance(
        "feature-equivalence",
        tre <= 1.25 * mind_tre and elapsed < 180.0,
        f"FeatureL1 TRE {tre:.3f} mm vs MIND {mind_tre:.3f} "
        f"(ratio {tre / mind_tre:.2f} <= 1.25), {elapsed:.1f} s")


# -------------------------------------- criterion: preprocessing endpoints


def test_preprocessing_endpoints(acceptance):
    shape = (8, 8, 8)
    m = np.zeros(shape, np.float32)
    m[2:6, 2:6, 2:6] = 1.0
    mask = BodyMask(make_volume(m, spacing=(1, 1, 1), semantics="label"))
    inmask = m.astype(bool)
    checks = []

    ct = np.full(shape, 40.0, np.float32)
    ct[2, 2, 2], ct[2, 2, 3], ct[2, 2, 4] = -1024.0, 3071.0, 1023.5
    out = preprocess_ct(make_volume(ct, spacing=(1, 1, 1), semantics="HU"),
                        mask).scalar()
    checks.append(out[2, 2, 2] == -1.0 and out[2, 2, 3] == 1.0
                  and out[2, 2, 4] == 0.0)
    checks.append((out[~inmask] == -1.0).all())

    rng = np.random.default_rng(3)
    cb = rng.uniform(100.0, 900.0, shape).astype(np.float32)
    out = preprocess_cbct(make_volume(cb, spacing=(1, 1, 1), semantics="HU"),
                          mask).scalar()
    vals = cb[inmask]
    hi = percentile(vals, 0.995)
    checks.append(out[inmask][np.argmin(vals)] == -1.0)
    checks.append((out[inmask][vals >= hi] == 1.0).all())
    checks.append((out[~inmask] == -1.0).all())

    mr = rng.uniform(0.0, 1800.0, shape).astype(np.float32)
    out = preprocess_mri(make_volume(mr, spacing=(1, 1, 1), semantics="HU"),
                         mask).scalar()
    z = out[inmask].astype(np.float64)
    checks.append(abs(z.mean()) <= 1e-6 and abs(z.std() - 1.0) <= 1e-6)
    checks.append((out[~inmask] == -1.0).all())

    acceptance(
        "preprocessing-endpoints",
        all(checks),
        f"CT -1024/3071/1023.5 endpoints exact, CBCT min/p99.5 clamps exact, "
        f"MRI in-mask z-scored to 1e-6, outside-mask -1 "
        f"({sum(bool(c) for c in checks)}/{len(checks)} checks)")


# ------------------------------------------------ criterion: determinism


def test_registration_determinism(acceptance):
    ph = make_phantom((32, 32, 32), (2.0, 2.0, 2.0), seed=5)
    t_true = random_deformation(ph.image.geometry, DeformationSpec(
        max_amplitude=3.0, seed=2, grid_spacing=24.0))
    fixed = warp_volume(ph.image, t_true)
    cfg = RegistrationConfig(metric="mse", levels=2, max_iters_per_level=40,
                             samples_per_iter=512, seed=9)

    def tre_of(res):
        return landmark_tre(t_true, res.transform, ph.landmarks)["mean"]

    try:
        set_max_threads(1)
        a = register(fixed, ph.image, ph.mask, cfg)
        b = register(fixed, ph.image, ph.mask, cfg)
        serial_identical = (
            np.array_equal(a.transform.coefficients, b.transform.coefficients)
            and all(ta["validation_costs"] == tb["validation_costs"]
                    for ta, tb in zip(a.per_level_costs, b.per_level_costs)))
        set_max_threads(0)
        c = register(fixed, ph.image, ph.mask, cfg)
        thread_gap = abs(tre_of(c) - tre_of(a))
    finally:
        set_max_threads(0)

    acceptance(
        "determinism",
        serial_identical and thread_gap < 0.05,
        f"same-seed single-thread runs bit-identical: {serial_identical}; "
        f"auto-thread TRE gap {thread_gap:.6f} mm (< 0.05)")


# -------------------------------------- criterion: transform file interop


def test_transform_file_interop(tmp_path, acceptance):
    rng = np.random.default_rng(12)
    geom = make_volume(np.zeros((20, 18, 16), np.float32),
                       spacing=(1.5, 2.0, 2.5), origin=(-7.0, 3.0, 11.0)).geometry
    t = make_grid_for_domain(geom, 12.0)
    t = t.with_coefficients(rng.normal(0.0, 2.0, (t.n_control_points, 3)))
    path = tmp_path / "t.txt"
    write_elastix_transform(t, str(path))
    r = parse_elastix_transform(str(path))
    lossless = (r.grid_dims == t.grid_dims
                and r.grid_spacing == t.grid_spacing
                and r.grid_origin == t.grid_origin
                and np.array_equal(r.grid_direction, t.grid_direction)
                and np.array_equal(r.coefficients, t.coefficients))

    n = 5 * 5 * 5 * 3
    zero = tmp_path / "zero.txt"
    zero.write_text("\n".join([
        '(Transform "BSplineTransform")',
        f"(NumberOfParameters {n})",
        "(TransformParameters {})".format(" ".join(["0"] * n)),
        "(GridSize 5 5 5)",
        "(GridSpacing 25 25 25)",
        "(GridOrigin -25 -25 -25)",
        "(GridDirection 1 0 0 0 1 0 0 0 1)",
        "(BSplineTransformSplineOrder 3)",
    ]) + "\n")
    ident = parse_elastix_transform(str(zero))
    pts = rng.uniform(-40.0, 90.0, size=(1000, 3))
    max_disp = float(np.abs(ident.transform_points(pts) - pts).max())

    acceptance(
        "transform-interop",
        lossless and max_disp == 0.0,
        f"round-trip lossless: {lossless}; zero-parameter file max "
        f"displacement {max_disp} at 1000 points")


# ------------------------------------------- criterion: ensemble algebra


def test_ensemble_algebra(acceptance):
    rng = np.random.default_rng(8)
    checks = []
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(4, 10, size=3))
        ch = int(rng.choice([1, 3]))
        shape = dims[::-1] + (ch,)
        v = make_volume(rng.normal(size=shape).astype(np.float32),
                        spacing=tuple(rng.uniform(0.5, 3.0, size=3)),
                        semantics="feature")
        axes = "".join(a for a in "xyz" if rng.random() < 0.5)
        s = FlipSpec.parse(axes) if axes else FlipSpec(axes=())
        fv = flip(flip(v, s), s)
        checks.append(np.array_equal(fv.data, v.data)
                      and fv.geometry == v.geometry)
        got = tta_average([(flip(v, s), s), (v, FlipSpec(axes=()))])
        checks.append(np.array_equal(got.data, v.data))

    vols = [make_volume(rng.normal(size=(6, 5, 4)).astype(np.float32),
                        spacing=(1, 1, 1)) for _ in range(5)]
    acc = np.zeros((6, 5, 4), np.float64)
    for v in vols:
        acc += v.scalar()
    want = acc / len(vols)
    got = fold_ensemble(vols).scalar()
    checks.append(np.allclose(got, want, atol=1e-6))

    acceptance(
        "ensemble-algebra",
        all(checks),
        f"involution + unflip-average identity on 100 random volumes, "
        f"5-fold mean matches oracle ({sum(checks)}/{len(checks)} checks)")
