"""Command-line front end: one executable, subcommand per pipeline stage.

Any parameter may come from a JSON config file (--config); explicit flags
win over file values. Every run writes a JSON report carrying
format_version and the fully-merged config so results stay reproducible.
Exit codes: 0 success, 1 usage, 2 data/validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import __version__
from .bspline import load_transform_json, save_transform_json, warp_volume
from .elastix import parse_elastix_transform
from .ensemble import FlipSpec, fold_ensemble, tta_average
from .errors import NumericError, SynthRegError, ValidationError
from .evaluation import REGIONS, aggregate_regions, case_report, error_map
from .mha import load_mha, write_mha
from .phantom import make_phantom, modality_remap, save_landmarks
from .preprocess import BodyMask, preprocess
from .registration import (
    OptimizerConfig,
    RegistrationConfig,
    evaluate_cost_trace,
    register,
)
from .volume import make_volume, set_max_threads

FORMAT_VERSION = 1

log = logging.getLogger("synthreg.cli")


class UsageError(Exception):
    """Bad invocation: missing/contradictory parameters, malformed config."""


def _merge_params(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer defaults < config file < explicit flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise UsageError(f"config {config_path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(
                f"config {config_path} has unknown keys: {', '.join(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _require(params: dict, *names: str) -> None:
    missing = [n for n in names if params.get(n) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required parameter(s): {flags}")


def _write_report(path: str, command: str, config: dict, payload: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, "command": command,
           "config": config, **payload}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_mask(path: str) -> BodyMask:
    return BodyMask.from_volume(load_mha(path))


def _sidecar(out_path: str) -> str:
    return out_path + ".report.json"


def _setup_threads(params: dict) -> None:
    set_max_threads(int(params.get("threads") or 0))


def _parse_triplet(text, cast):
    parts = str(text).split(",")
    if len(parts) == 1:
        v = cast(parts[0])
        return (v, v, v)
    if len(parts) != 3:
        raise UsageError(f"expected one value or three comma-separated, got {text!r}")
    return tuple(cast(p) for p in parts)


def _cmd_preprocess(args) -> int:
    defaults = {"modality": None, "image": None, "mask": None, "out": None,
                "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "modality", "image", "mask", "out")
    _setup_threads(p)
    t0 = time.perf_counter()
    image = load_mha(p["image"])
    mask = _load_mask(p["mask"])
    out = preprocess(image, mask, p["modality"])
    write_mha(out, p["out"])
    _write_report(_sidecar(p["out"]), "preprocess", p,
                  {"seconds": time.perf_counter() - t0, "output": p["out"]})
    log.info("command=preprocess modality=%s out=%s", p["modality"], p["out"])
    return 0


def _cmd_register(args) -> int:
    defaults = {"fixed": None, "moving": None, "mask": None, "metric": "mse",
                "levels": 3, "grid_spacing": 10.0, "samples": 2048,
                "iters": 500, "seed": 0, "out": None, "report": None,
                "fixed_features": None, "moving_features": None,
                "step_size": 0.5, "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "fixed", "moving", "mask", "out")
    _setup_threads(p)
    t0 = time.perf_counter()
    fixed = load_mha(p["fixed"])
    moving = load_mha(p["moving"])
    mask = _load_mask(p["mask"])
    features = None
    if (p["fixed_features"] is None) != (p["moving_features"] is None):
        raise UsageError("--fixed-features and --moving-features go together")
    if p["fixed_features"] is not None:
        features = (load_mha(p["fixed_features"]), load_mha(p["moving_features"]))
    cfg = RegistrationConfig(
        levels=int(p["levels"]),
        final_grid_spacing=float(p["grid_spacing"]),
        metric=p["metric"],
        samples_per_iter=int(p["samples"]),
        max_iters_per_level=int(p["iters"]),
        optimizer=OptimizerConfig(step_size=float(p["step_size"])),
        seed=int(p["seed"]),
    )
    result = register(fixed, moving, mask, cfg, features=features)
    save_transform_json(result.transform, p["out"])
    report_path = p["report"] or _sidecar(p["out"])
    _write_report(report_path, "register", p, {
        "summary": evaluate_cost_trace(result),
        "cost_traces": result.per_level_costs,
        "iterations_used": result.iterations_used,
        "wall_time": result.wall_time,
        "transform": p["out"],
    })
    log.info("command=register metric=%s wall_time=%.2f out=%s",
             p["metric"], result.wall_time, p["out"])
    return 0


def _load_transform_any(path: str):
    """Native JSON first, Elastix parameter-file syntax as fallback."""
    try:
        return load_transform_json(path)
    except (ValidationError, json.JSONDecodeError, UnicodeDecodeError):
        return parse_elastix_transform(path)


def _cmd_transform_apply(args) -> int:
    defaults = {"transform": None, "image": None, "like": None, "out": None,
                "background": None, "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "transform", "image", "out")
    _setup_threads(p)
    t0 = time.perf_counter()
    t = _load_transform_any(p["transform"])
    image = load_mha(p["image"])
    target = load_mha(p["like"]).geometry if p["like"] else None
    background = None if p["background"] is None else float(p["background"])
    warped = warp_volume(image, t, target=target, background=background)
    write_mha(warped, p["out"])
    _write_report(_sidecar(p["out"]), "transform apply", p,
                  {"seconds": time.perf_counter() - t0, "output": p["out"]})
    log.info("command=transform-apply out=%s", p["out"])
    return 0


def _cmd_evaluate(args) -> int:
    defaults = {"gt": None, "pred": None, "mask": None, "gt_seg": None,
                "pred_seg": None, "region": None, "report": None,
                "case_id": None, "label": 1, "data_range": 4095.0,
                "scales": 5, "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "gt", "pred", "mask", "region", "report")
    _setup_threads(p)
    gt = load_mha(p["gt"])
    pred = load_mha(p["pred"])
    mask = _load_mask(p["mask"])
    gt_seg = load_mha(p["gt_seg"]) if p["gt_seg"] else None
    pred_seg = load_mha(p["pred_seg"]) if p["pred_seg"] else None
    case_id = p["case_id"] or p["pred"]
    rep = case_report(case_id, p["region"], gt, pred, mask,
                      gt_seg=gt_seg, pred_seg=pred_seg, label=int(p["label"]),
                      data_range=float(p["data_range"]), scales=int(p["scales"]))
    _write_report(p["report"], "evaluate", p, {"metrics": rep.to_dict()})
    log.info("command=evaluate case=%s mae=%.3f report=%s",
             case_id, rep.mae, p["report"])
    return 0


def _cmd_report_aggregate(args) -> int:
    defaults = {"inputs": None, "out": None}
    p = _merge_params(args, defaults)
    _require(p, "inputs", "out")
    by_region: dict[str, dict[str, list]] = {}
    cases = []
    for path in p["inputs"]:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: not valid JSON: {e}") from e
        metrics = doc.get("metrics")
        if not isinstance(metrics, dict) or "region" not in metrics:
            raise ValidationError(f"{path}: not an evaluation report")
        region = metrics["region"]
        if region not in REGIONS:
            raise ValidationError(f"{path}: unknown region {region!r}")
        cases.append(metrics.get("case_id", path))
        bucket = by_region.setdefault(region, {})
        for name in ("mae", "psnr", "ms_ssim", "dice", "hd95"):
            if metrics.get(name) is not None:
                bucket.setdefault(name, []).append(float(metrics[name]))
    per_region = {
        region: {name: float(np.mean(vals)) for name, vals in buckets.items()}
        for region, buckets in by_region.items()
    }
    agg = aggregate_regions(per_region)
    _write_report(p["out"], "report aggregate", {"inputs": p["inputs"]}, {
        "per_region": agg.per_region,
        "aggregated": agg.aggregated,
        "aggregated_display": agg.display(),
        "cases": cases,
    })
    log.info("command=report-aggregate regions=%d cases=%d out=%s",
             len(per_region), len(cases), p["out"])
    return 0


def _cmd_ensemble(args) -> int:
    defaults = {"inputs": None, "flips": None, "out": None, "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "inputs", "out")
    _setup_threads(p)
    t0 = time.perf_counter()
    volumes = [load_mha(path) for path in p["inputs"]]
    if p["flips"] is not None:
        entries = str(p["flips"]).split(",")
        if len(entries) != len(volumes):
            raise UsageError(
                f"--flips lists {len(entries)} entries for {len(volumes)} inputs")
        preds = [(v, FlipSpec.parse(e)) for v, e in zip(volumes, entries)]
        out = tta_average(preds)
    else:
        out = fold_ensemble(volumes)
    write_mha(out, p["out"])
    _write_report(_sidecar(p["out"]), "ensemble", p,
                  {"seconds": time.perf_counter() - t0, "inputs": len(volumes),
                   "output": p["out"]})
    log.info("command=ensemble inputs=%d out=%s", len(volumes), p["out"])
    return 0


def _cmd_errormap(args) -> int:
    defaults = {"gt": None, "pred": None, "mask": None, "out": None,
                "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "gt", "pred", "mask", "out")
    _setup_threads(p)
    t0 = time.perf_counter()
    gt = load_mha(p["gt"])
    pred = load_mha(p["pred"])
    mask = _load_mask(p["mask"])
    write_mha(error_map(gt, pred, mask), p["out"])
    _write_report(_sidecar(p["out"]), "errormap", p,
                  {"seconds": time.perf_counter() - t0, "output": p["out"]})
    log.info("command=errormap out=%s", p["out"])
    return 0


def _cmd_phantom_make(args) -> int:
    defaults = {"dims": "64", "spacing": "2", "seed": 0, "twin_mode": "invert",
                "out_prefix": None, "threads": 0}
    p = _merge_params(args, defaults)
    _require(p, "out_prefix")
    _setup_threads(p)
    t0 = time.perf_counter()
    dims = _parse_triplet(p["dims"], int)
    spacing = _parse_triplet(p["spacing"], float)
    ph = make_phantom(dims, spacing, seed=int(p["seed"]))
    prefix = p["out_prefix"]
    write_mha(ph.image, prefix + "_image.mha")
    mask_vol = make_volume(ph.mask.indicator.astype(np.float32),
                           spacing=ph.image.spacing, origin=ph.image.origin,
                           direction=ph.image.direction, semantics="label",
                           element_type="MET_UCHAR")
    write_mha(mask_vol, prefix + "_mask.mha")
    write_mha(modality_remap(ph.image, p["twin_mode"]), prefix + "_twin.mha")
    save_landmarks(ph.landmarks, prefix + "_landmarks.txt")
    _write_report(prefix + ".report.json", "phantom make", p, {
        "seconds": time.perf_counter() - t0,
        "outputs": [prefix + s for s in
                    ("_image.mha", "_mask.mha", "_twin.mha", "_landmarks.txt")],
        "landmarks": int(ph.landmarks.shape[0]),
    })
    log.info("command=phantom-make dims=%s seed=%s prefix=%s",
             dims, p["seed"], prefix)
    return 0


def _add_common(sp):
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--threads", type=int, help="worker cap, 0 = auto")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthreg",
        description="Deformable registration and synthesis evaluation toolkit")
    parser.add_argument("--version", action="version",
                        version=f"synthreg {__version__}")
    sub = parser.add_subparsers(dest="subcommand")

    sp = sub.add_parser("preprocess", help="normalize a volume to [-1, 1]")
    _add_common(sp)
    sp.add_argument("--modality", choices=("ct", "cbct", "mri"))
    sp.add_argument("--image")
    sp.add_argument("--mask")
    sp.add_argument("--out")
    sp.set_defaults(handler=_cmd_preprocess)

    sp = sub.add_parser("register", help="deformable B-spline registration")
    _add_common(sp)
    sp.add_argument("--fixed")
    sp.add_argument("--moving")
    sp.add_argument("--mask")
    sp.add_argument("--metric", choices=("mse", "nmi", "mind", "feat"))
    sp.add_argument("--levels", type=int)
    sp.add_argument("--grid-spacing", type=float, dest="grid_spacing")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--step-size", type=float, dest="step_size")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--report")
    sp.add_argument("--fixed-features", dest="fixed_features")
    sp.add_argument("--moving-features", dest="moving_features")
    sp.set_defaults(handler=_cmd_register)

    sp = sub.add_parser("transform", help="transform file operations")
    tsub = sp.add_subparsers(dest="transform_command")
    spa = tsub.add_parser("apply", help="warp a volume with a transform")
    _add_common(spa)
    spa.add_argument("--transform")
    spa.add_argument("--image")
    spa.add_argument("--like", help="take the output grid from this volume")
    spa.add_argument("--background", type=float)
    spa.add_argument("--out")
    spa.set_defaults(handler=_cmd_transform_apply)

    sp = sub.add_parser("evaluate", help="per-case synthesis metrics")
    _add_common(sp)
    sp.add_argument("--gt")
    sp.add_argument("--pred")
    sp.add_argument("--mask")
    sp.add_argument("--gt-seg", dest="gt_seg")
    sp.add_argument("--pred-seg", dest="pred_seg")
    sp.add_argument("--region", choices=REGIONS)
    sp.add_argument("--case-id", dest="case_id")
    sp.add_argument("--label", type=int)
    sp.add_argument("--data-range", type=float, dest="data_range")
    sp.add_argument("--scales", type=int)
    sp.add_argument("--report")
    sp.set_defaults(handler=_cmd_evaluate)

    sp = sub.add_parser("report", help="report post-processing")
    rsub = sp.add_subparsers(dest="report_command")
    spa = rsub.add_parser("aggregate", help="cross-region table from case reports")
    spa.add_argument("--config", help="JSON config file; flags override it")
    spa.add_argument("--inputs", nargs="+")
    spa.add_argument("--out")
    spa.set_defaults(handler=_cmd_report_aggregate)

    sp = sub.add_parser("ensemble", help="average predictions (optional TTA unflip)")
    _add_common(sp)
    sp.add_argument("--inputs", nargs="+")
    sp.add_argument("--flips",
                    help="comma-separated axis letters parallel to --inputs, "
                         "empty entry = no flip (e.g. x,,yz)")
    sp.add_argument("--out")
    sp.set_defaults(handler=_cmd_ensemble)

    sp = sub.add_parser("errormap", help="voxel-wise |gt - pred| inside the mask")
    _add_common(sp)
    sp.add_argument("--gt")
    sp.add_argument("--pred")
    sp.add_argument("--mask")
    sp.add_argument("--out")
    sp.set_defaults(handler=_cmd_errormap)

    sp = sub.add_parser("phantom", help="synthetic data")
    psub = sp.add_subparsers(dest="phantom_command")
    spa = psub.add_parser("make", help="generate a phantom bundle")
    _add_common(spa)
    spa.add_argument("--dims", help="cube size or nx,ny,nz")
    spa.add_argument("--spacing", help="isotropic mm or sx,sy,sz")
    spa.add_argument("--seed", type=int)
    spa.add_argument("--twin-mode", dest="twin_mode",
                     choices=("invert", "gamma", "piecewise"))
    spa.add_argument("--out-prefix", dest="out_prefix")
    spa.set_defaults(handler=_cmd_phantom_make)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if (e.code or 0) == 0 else 1
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                            format="%(levelname)s %(name)s %(message)s")
    handler = getattr(args, "handler", None)
    if handler is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return handler(args)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 1
    except NumericError as e:
        print(json.dumps({"error": "numeric", "message": str(e)}), file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(json.dumps({"error": "missing_file", "message": str(e)}),
              file=sys.stderr)
        return 2
    except SynthRegError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
