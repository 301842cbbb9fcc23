"""Multi-resolution deformable registration driver.

Coarse-to-fine over Gaussian pyramids with a control-grid spacing schedule
of final_grid_spacing * 2^L; the transform is carried between levels by
exact dyadic refinement. Each iteration draws a fresh seeded sample plan;
acceptance is by best cost on a fixed validation plan, which makes the
per-level cost decrease monotone by construction. Optimization is an
adaptive per-parameter first-order moment scheme on the coefficients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import BSplineTransform, make_grid_for_domain, refine_dyadic
from .errors import NumericError, ValidationError
from .preprocess import BodyMask
from .similarity import (
    MattesConfig,
    MindConfig,
    SamplePlan,
    feature_l1_metric,
    feature_ssd_metric,
    mattes_mi_metric,
    mind_descriptor,
    mse_metric,
    plan_uniform_random,
)
from .volume import Volume, gaussian_pyramid, require_same_grid

METRICS = ("mse", "nmi", "mind", "feat")

# Step-size schedule applied on top of OptimizerConfig.step_size: a linear
# warmup over the first iterations followed by inverse-time decay.
_STEP_WARMUP_ITERS = 10
_STEP_DECAY_TAU = 20.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive first-order moment scheme (per-parameter step scaling)."""

    step_size: float = 0.5  # mm
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValidationError("optimizer step_size must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("optimizer moment decays must be in [0, 1)")


@dataclass(frozen=True)
class RegistrationConfig:
    """Driver settings; the 3-level pyramid and 10 mm final grid spacing
    follow the reference pre-alignment configuration, everything else is an
    engine default."""

    levels: int = 3
    final_grid_spacing: float = 10.0
    metric: str = "mse"
    samples_per_iter: int = 2048
    max_iters_per_level: int = 500
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    convergence_window: int = 20
    convergence_tol: float = 1e-4
    seed: int = 0
    validation_samples: int = 4096
    mattes_bins: int = 32
    mind: MindConfig = field(default_factory=MindConfig)
    feature_penalty: str = "l1"

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if self.final_grid_spacing <= 0:
            raise ValidationError("final_grid_spacing must be > 0")
        if self.samples_per_iter < 64:
            raise ValidationError("samples_per_iter must be >= 64")
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r} (expected one of {METRICS})")
        if self.convergence_window < 1 or self.convergence_tol < 0:
            raise ValidationError("bad convergence settings")


@dataclass(frozen=True)
class RegistrationResult:
    transform: BSplineTransform
    per_level_costs: list
    iterations_used: list
    wall_time: float


def _mask_pyramid(mask: BodyMask, levels: int) -> list[BodyMask]:
    vols = gaussian_pyramid(mask.volume, levels)
    out = [mask]
    for v in vols[1:]:
        out.append(BodyMask.from_volume(v))
    return out


def _level_evaluator(cfg: RegistrationConfig, fixed: Volume, moving: Volume,
                     mask: BodyMask, features):
    """Bind the per-level metric closure; precomputes static descriptors,
    frozen intensity ranges, or feature pyramids as the metric needs."""
    if cfg.metric == "mse":
        return lambda t, plan: mse_metric(fixed, moving, t, plan)
    if cfg.metric == "nmi":
        inmask = fixed.scalar()[mask.indicator]
        mcfg = MattesConfig(
            bins=cfg.mattes_bins,
            fixed_range=(float(inmask.min()), float(inmask.max())),
            moving_range=(float(moving.data.min()), float(moving.data.max())),
        )
        return lambda t, plan: mattes_mi_metric(fixed, moving, t, plan, mcfg)
    if cfg.metric == "mind":
        df = mind_descriptor(fixed, cfg.mind, mask)
        dm = mind_descriptor(moving, cfg.mind)
        return lambda t, plan: feature_ssd_metric(df, dm, t, plan)
    ff, mf = features
    if cfg.feature_penalty == "l2":
        return lambda t, plan: feature_l1_metric(ff, mf, t, plan, penalty="l2")
    return lambda t, plan: feature_l1_metric(ff, mf, t, plan)


def register(fixed: Volume, moving: Volume, fixed_mask: BodyMask,
             cfg: RegistrationConfig = RegistrationConfig(),
             features: tuple[Volume, Volume] | None = None) -> RegistrationResult:
    """Estimate the B-spline transform aligning moving onto fixed.

    Args:
        features: (fixed_features, moving_features), required iff
            cfg.metric == "feat"; both multi-channel, on the respective
            image grids.

    Raises:
        NumericError: non-finite cost or coefficients; carries the cost
            traces collected so far in ``.traces``.
    """
    start = time.perf_counter()
    require_same_grid(fixed, fixed_mask.volume, "fixed image and mask")
    fixed_mask.require_nonempty()
    if cfg.metric == "feat":
        if features is None:
            raise ValidationError("metric 'feat' requires feature volumes")
        ff, mf = features
        if ff.channels != mf.channels:
            raise ValidationError(
                f"feature channel mismatch: {ff.channels} vs {mf.channels}")
        require_same_grid(ff, fixed, "fixed features and fixed image")
        require_same_grid(mf, moving, "moving features and moving image")
    elif features is not None:
        raise ValidationError(f"metric {cfg.metric!r} does not take feature volumes")

    fixed_pyr = gaussian_pyramid(fixed, cfg.levels)
    moving_pyr = gaussian_pyramid(moving, cfg.levels)
    mask_pyr = _mask_pyramid(fixed_mask, cfg.levels)
    feat_pyr = None
    if features is not None:
        feat_pyr = (gaussian_pyramid(features[0], cfg.levels),
                    gaussian_pyramid(features[1], cfg.levels))

    coarsest = cfg.levels - 1
    transform = make_grid_for_domain(
        fixed.geometry, cfg.final_grid_spacing * 2.0**coarsest)

    traces: list[dict] = []
    iterations_used: list[int] = []
    opt = cfg.optimizer

    for level in range(coarsest, -1, -1):
        f_lvl, m_lvl, mask_lvl = fixed_pyr[level], moving_pyr[level], mask_pyr[level]
        feats_lvl = None
        if feat_pyr is not None:
            feats_lvl = (feat_pyr[0][level], feat_pyr[1][level])
        evaluate = _level_evaluator(cfg, f_lvl, m_lvl, mask_lvl, feats_lvl)

        val_plan = plan_uniform_random(mask_lvl, cfg.validation_samples,
                                       seed=[cfg.seed, level, 0])

        trace = {
            "level": level,
            "grid_spacing": list(transform.grid_spacing),
            "sample_costs": [],
            "validation_costs": [],
        }
        traces.append(trace)

        coef = transform.coefficients.copy()
        m1 = np.zeros_like(coef)
        m2 = np.zeros_like(coef)
        n = transform.n_control_points

        def val_cost_of(t):
            try:
                c = evaluate(t, val_plan).cost
            except NumericError as e:
                raise NumericError(
                    f"aborted at level {level} validation: {e}",
                    traces=traces) from e
            if not np.isfinite(c):
                raise NumericError(
                    f"non-finite validation cost at level {level}", traces=traces)
            return c

        best_cost = val_cost_of(transform)
        best_coef = coef.copy()
        best_history = [best_cost]
        trace["initial_cost"] = best_cost
        trace["validation_costs"].append(best_cost)

        iters = 0
        for it in range(cfg.max_iters_per_level):
            iters = it + 1
            plan = plan_uniform_random(mask_lvl, cfg.samples_per_iter,
                                       seed=[cfg.seed, level, it + 1])
            try:
                res = evaluate(transform, plan)
            except (ValidationError, NumericError) as e:
                raise NumericError(
                    f"metric failure at level {level} iteration {it}: {e}",
                    traces=traces) from e
            trace["sample_costs"].append(res.cost)

            grad = res.grad.reshape(3, n).T
            m1 = opt.beta1 * m1 + (1.0 - opt.beta1) * grad
            m2 = opt.beta2 * m2 + (1.0 - opt.beta2) * grad * grad
            mhat = m1 / (1.0 - opt.beta1 ** (it + 1))
            vhat = m2 / (1.0 - opt.beta2 ** (it + 1))
            # Warmup keeps the bias-corrected first steps from jolting every
            # coefficient by the full base step at once; the inverse-time
            # decay shrinks the stochastic-gradient noise ball so late
            # iterations refine instead of wandering.
            sched = min(1.0, (it + 1) / _STEP_WARMUP_ITERS) / (1.0 + it / _STEP_DECAY_TAU)
            coef = coef - (opt.step_size * sched) * mhat / (np.sqrt(vhat) + opt.eps)
            if not np.isfinite(coef).all():
                raise NumericError(
                    f"non-finite coefficients at level {level} iteration {it}",
                    traces=traces)
            transform = transform.with_coefficients(coef)

            vc = val_cost_of(transform)
            trace["validation_costs"].append(vc)
            if vc < best_cost:
                best_cost = vc
                best_coef = coef.copy()
            best_history.append(best_cost)

            w = cfg.convergence_window
            if len(best_history) > w:
                ref = best_history[-w - 1]
                if ref - best_cost < cfg.convergence_tol * abs(ref):
                    break

        transform = transform.with_coefficients(best_coef)
        trace["final_cost"] = best_cost
        trace["iterations"] = iters
        iterations_used.append(iters)

        if level > 0:
            transform = refine_dyadic(transform)

    return RegistrationResult(
        transform=transform,
        per_level_costs=traces,
        iterations_used=iterations_used,
        wall_time=time.perf_counter() - start,
    )


def evaluate_cost_trace(result) -> dict:
    """Summarize cost traces: per-level initial/final cost, relative
    decrease, iterations, plus a flag for non-finite terminal costs.

    Accepts a RegistrationResult or a raw trace list (e.g. from
    NumericError.traces of an aborted run).
    """
    traces = result.per_level_costs if isinstance(result, RegistrationResult) else result
    if not traces:
        raise ValidationError("empty cost trace")
    levels = []
    finite = True
    for tr in traces:
        initial = tr.get("initial_cost")
        costs = tr.get("validation_costs", [])
        final = tr.get("final_cost", costs[-1] if costs else None)
        entry = {
            "level": tr.get("level"),
            "initial_cost": initial,
            "final_cost": final,
            "iterations": tr.get("iterations", max(0, len(costs) - 1)),
        }
        if initial is None or final is None or not np.isfinite([initial, final]).all():
            finite = False
            entry["relative_decrease"] = None
        else:
            denom = abs(initial) if initial != 0 else 1.0
            entry["relative_decrease"] = (initial - final) / denom
        levels.append(entry)
    return {"levels": levels, "finite": finite}
