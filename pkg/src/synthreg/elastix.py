"""Elastix TransformParameters text-file import/export.

Only the cubic B-spline transform entry is understood: `(Transform
"BSplineTransform")` or name variants containing that string. Parameters
follow the Elastix order (all x-components, then y, then z). GridDirection
is read and written row-major. A reference to an initial transform other
than "NoInitialTransform" is reported with a warning and otherwise
ignored; composed stacks are out of scope.
"""

from __future__ import annotations

import logging
import re

import numpy as np

from .bspline import BSplineTransform
from .errors import HeaderParseError, UnsupportedFormatError, ValidationError

log = logging.getLogger("synthreg.elastix")

_LINE_RE = re.compile(r"^\(\s*([A-Za-z0-9_]+)\s+(.*?)\s*\)$")


def _parse_tokens(raw: str):
    """Split an entry's value field into strings (quoted) and floats."""
    out = []
    for tok in re.findall(r'"[^"]*"|\S+', raw):
        if tok.startswith('"'):
            out.append(tok[1:-1])
        else:
            out.append(float(tok))
    return out


def parse_elastix_transform(path: str) -> BSplineTransform:
    """Load a B-spline transform from an Elastix TransformParameters file.

    Raises:
        HeaderParseError: malformed entry (reports the line number).
        UnsupportedFormatError: transform type is not B-spline, or the
            spline order is not 3.
        ValidationError: parameter count inconsistent with the grid size.
    """
    entries: dict[str, list] = {}
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("//"):
                continue
            m = _LINE_RE.match(text)
            if not m:
                raise HeaderParseError(f"{path}: malformed entry at line {line_no}: {text!r}")
            key, raw = m.group(1), m.group(2)
            try:
                entries[key] = _parse_tokens(raw)
            except ValueError:
                raise HeaderParseError(
                    f"{path}: unparseable value at line {line_no}: {text!r}"
                )

    if "Transform" not in entries:
        raise HeaderParseError(f"{path}: missing (Transform ...) entry")
    name = str(entries["Transform"][0])
    if "BSplineTransform" not in name:
        raise UnsupportedFormatError(f"{path}: transform type {name!r} is not B-spline")

    order = entries.get("BSplineTransformSplineOrder", [3.0])[0]
    if int(order) != 3:
        raise UnsupportedFormatError(f"{path}: spline order {int(order)} not supported (need 3)")

    for key, n in (("GridSize", 3), ("GridSpacing", 3), ("GridOrigin", 3),
                   ("GridDirection", 9), ("TransformParameters", None)):
        if key not in entries:
            raise HeaderParseError(f"{path}: missing ({key} ...) entry")
        if n is not None and len(entries[key]) != n:
            raise HeaderParseError(f"{path}: {key} must have {n} values")

    dims = tuple(int(v) for v in entries["GridSize"])
    params = np.asarray(entries["TransformParameters"], dtype=np.float64)
    expected = 3 * int(np.prod(dims))
    if params.size != expected:
        raise ValidationError(
            f"{path}: TransformParameters has {params.size} values, "
            f"GridSize {dims} needs {expected}"
        )
    if "NumberOfParameters" in entries:
        declared = int(entries["NumberOfParameters"][0])
        if declared != expected:
            raise ValidationError(
                f"{path}: NumberOfParameters {declared} disagrees with grid ({expected})"
            )

    initial = entries.get("InitialTransformParametersFileName", ["NoInitialTransform"])[0]
    if str(initial) not in ("NoInitialTransform", ""):
        log.warning(
            "%s: references initial transform %r; only the B-spline component is loaded",
            path, initial,
        )

    direction = np.asarray(entries["GridDirection"], dtype=np.float64).reshape(3, 3)
    return BSplineTransform.from_flat_parameters(
        dims,
        tuple(float(v) for v in entries["GridSpacing"]),
        tuple(float(v) for v in entries["GridOrigin"]),
        direction,
        params,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_elastix_transform(t: BSplineTransform, path: str) -> None:
    """Write a TransformParameters file that parses back losslessly."""
    lines = [
        '(Transform "BSplineTransform")',
        f"(NumberOfParameters {3 * t.n_control_points})",
        "(TransformParameters " + " ".join(_fmt(v) for v in t.flat_parameters()) + ")",
        '(InitialTransformParametersFileName "NoInitialTransform")',
        "(GridSize " + " ".join(str(d) for d in t.grid_dims) + ")",
        "(GridIndex 0 0 0)",
        "(GridSpacing " + " ".join(_fmt(s) for s in t.grid_spacing) + ")",
        "(GridOrigin " + " ".join(_fmt(o) for o in t.grid_origin) + ")",
        "(GridDirection " + " ".join(_fmt(v) for v in t.grid_direction.reshape(-1)) + ")",
        "(BSplineTransformSplineOrder 3)",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
