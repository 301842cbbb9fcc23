"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime error (missing files,
unknown model, bad layer, invalid data).
"""

from __future__ import annotations

import argparse
import sys

from .errors import FeatexError
from .extract import ExtractorSpec, extract, init_weights, list_layers
from .models import model_ids

_VERSION = "0.1.0"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _cmd_extract(args: argparse.Namespace) -> int:
    spec = ExtractorSpec(
        model_id=args.model,
        layer_index=args.layer,
        channel_cap=args.channel_cap,
        resample_to_input=not args.native,
    )
    summary = extract(args.image, spec, args.out, weights_dir=args.weights_dir)
    dims = "x".join(str(d) for d in summary["dims"])
    grid = "resampled to input grid" if summary["resampled"] else "native grid"
    print(
        f"wrote {summary['out']}: model {summary['model_id']} "
        f"layer {summary['layer_index']} channels {summary['channels']} "
        f"dims {dims} ({grid})"
    )
    return 0


def _cmd_list_layers(args: argparse.Namespace) -> int:
    for row in list_layers(args.model):
        dx, dy, dz = row["downsample"]
        print(
            f"layer {row['index']:2d}: channels {row['channels']:3d}, "
            f"downsample x{dx} y{dy} z{dz}"
        )
    return 0


def _cmd_init_weights(args: argparse.Namespace) -> int:
    path = init_weights(args.model, weights_dir=args.weights_dir, force=args.force)
    print(f"weights ready at {path}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="featex", description="Frozen-encoder feature extraction")
    parser.add_argument("--version", action="version", version=f"featex {_VERSION}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("extract", help="extract a feature volume from a scalar image")
    p.add_argument("--model", default="m730", help=f"one of: {', '.join(model_ids())}")
    p.add_argument("--layer", type=int, default=7, help="1-based layer index")
    p.add_argument("--image", required=True, help="input .mha")
    p.add_argument("--out", required=True, help="output .mha")
    p.add_argument("--channel-cap", type=int, default=32, help="max channels kept")
    p.add_argument(
        "--native",
        action="store_true",
        help="write the native layer grid instead of resampling to the input",
    )
    p.add_argument("--weights-dir", default=None)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("list-layers", help="show a model's layer table")
    p.add_argument("--model", default="m730")
    p.set_defaults(func=_cmd_list_layers)

    p = sub.add_parser("init-weights", help="materialize a model's weights file")
    p.add_argument("--model", default="m730")
    p.add_argument("--weights-dir", default=None)
    p.add_argument("--force", action="store_true", help="rewrite an existing file")
    p.set_defaults(func=_cmd_init_weights)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (FeatexError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())
