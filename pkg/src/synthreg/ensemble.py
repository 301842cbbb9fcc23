"""Flip-based test-time augmentation and cross-fold ensemble averaging.

Flips act in index space: the data array is mirrored, the geometry header
is left untouched. That matches how slice-based synthesis models consume
arrays; world-space flipping is deliberately not offered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import Volume, require_same_grid

_AXIS_TO_DATA_AXIS = {"x": 2, "y": 1, "z": 0}


@dataclass(frozen=True)
class FlipSpec:
    """Subset of index axes to mirror; applying it twice is the identity."""

    axes: tuple = ()

    def __post_init__(self):
        seen = []
        for a in self.axes:
            if a not in _AXIS_TO_DATA_AXIS:
                raise ValidationError(f"flip axis must be one of x, y, z; got {a!r}")
            if a not in seen:
                seen.append(a)
        object.__setattr__(self, "axes", tuple(sorted(seen)))

    @classmethod
    def parse(cls, text: str) -> "FlipSpec":
        """Concatenated axis letters, e.g. '', 'x', 'xz'."""
        return cls(axes=tuple(text.strip()))


def flip(v: Volume, s: FlipSpec) -> Volume:
    """Mirror the data along the given index axes; geometry unchanged."""
    if not s.axes:
        return v
    data_axes = tuple(_AXIS_TO_DATA_AXIS[a] for a in s.axes)
    return v.with_data(np.flip(v.data, axis=data_axes).copy())


def _mean_volume(volumes: list[Volume], what: str) -> Volume:
    if not volumes:
        raise ValidationError(f"{what} needs at least one prediction")
    first = volumes[0]
    for other in volumes[1:]:
        require_same_grid(first, other, what)
        if other.channels != first.channels:
            raise ValidationError(
                f"{what}: channel mismatch {other.channels} vs {first.channels}")
    stack = np.stack([v.data.astype(np.float64) for v in volumes])
    mean = stack.mean(axis=0)
    if all(v.data.dtype == np.float64 for v in volumes):
        out, etype = mean, "MET_DOUBLE"
    else:
        out, etype = mean.astype(np.float32), "MET_FLOAT"
    return Volume(geometry=first.geometry, data=out,
                  element_semantics=first.element_semantics, element_type=etype)


def tta_average(predictions: list) -> Volume:
    """Unflip each (volume, FlipSpec) prediction, then voxel-wise mean.

    Accumulation is float64 regardless of input dtype; the result inherits
    the first prediction's geometry and semantics.
    """
    if not predictions:
        raise ValidationError("tta_average needs at least one prediction")
    unflipped = [flip(v, s) for v, s in predictions]
    return _mean_volume(unflipped, "tta_average")


def fold_ensemble(predictions: list) -> Volume:
    """Voxel-wise mean of equally-gridded fold predictions."""
    return _mean_volume(list(predictions), "fold_ensemble")
