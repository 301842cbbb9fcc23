"""Feature-map extraction from frozen encoders to MetaImage volumes."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from . import mio
from .errors import DataError, GeometryError, LayerRangeError, MissingWeightsError
from .models import build_model, layer_table, model_ids

__all__ = [
    "ExtractorSpec",
    "default_weights_dir",
    "extract",
    "init_weights",
    "list_layers",
    "weights_path",
]


@dataclass(frozen=True)
class ExtractorSpec:
    """What to extract.

    Attributes:
        model_id: registered encoder name.
        layer_index: 1-based layer to tap.
        channel_cap: keep at most this many channels, subsampled uniformly.
        resample_to_input: trilinearly upsample the feature map back onto the
            input grid so the output geometry matches the input exactly; when
            False the native layer grid is written instead.
    """

    model_id: str = "m730"
    layer_index: int = 7
    channel_cap: int = 32
    resample_to_input: bool = True

    def __post_init__(self) -> None:
        if self.layer_index < 1:
            raise LayerRangeError(f"layer index must be >= 1, got {self.layer_index}")
        if self.channel_cap < 1:
            raise ValueError(f"channel cap must be >= 1, got {self.channel_cap}")


def default_weights_dir() -> str:
    env = os.environ.get("FEATEX_WEIGHTS_DIR")
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "featex")


def weights_path(model_id: str, weights_dir: str | None = None) -> str:
    """File that holds the frozen weights for a model."""
    return os.path.join(weights_dir or default_weights_dir(), f"{model_id}.pt")


def init_weights(model_id: str, weights_dir: str | None = None, force: bool = False) -> str:
    """Materialize the deterministic weights file for a model.

    Args:
        model_id: registered encoder name.
        weights_dir: target directory; defaults to FEATEX_WEIGHTS_DIR or
            ~/.cache/featex.
        force: rewrite even if the file already exists.

    Returns:
        Path of the weights file.
    """
    path = weights_path(model_id, weights_dir)
    if os.path.exists(path) and not force:
        build_model(model_id)
        return path
    os.makedirs(os.path.dirname(path), exist_ok=True)
    model = build_model(model_id)
    tmp = path + ".part"
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, path)
    return path


def _load_model(model_id: str, weights_dir: str | None):
    path = weights_path(model_id, weights_dir)
    if not os.path.exists(path):
        raise MissingWeightsError(
            f"no weights for model {model_id!r} at {path}; "
            f"run `featex init-weights --model {model_id}` first"
        )
    model = build_model(model_id)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def list_layers(model_id: str) -> tuple[dict, ...]:
    """Layer enumeration for a model.

    Args:
        model_id: registered encoder name.

    Returns:
        Tuple of rows {"index", "channels", "downsample", "origin_shift"}
        where downsample holds per-axis (x, y, z) grid reduction factors and
        origin_shift the world offset of native voxel 0 in input voxels.
    """
    rows = []
    for row in layer_table(model_id):
        dx, dy, dz = row["downsample"]
        shift = tuple(0.0 if f == 1 else _native_origin_shift(model_id, f) for f in (dx, dy, dz))
        rows.append({**row, "origin_shift": shift})
    return tuple(rows)


def _native_origin_shift(model_id: str, factor: int) -> float:
    # Strided odd-kernel convs keep output voxel i centered on input voxel
    # f*i; patch embedding centers it mid-patch instead.
    if model_id == "vit2d":
        return (factor - 1) / 2.0
    return 0.0


def _subsample_channels(feats: torch.Tensor, cap: int) -> torch.Tensor:
    total = feats.shape[1]
    if total <= cap:
        return feats
    idx = np.floor(np.linspace(0.0, total, num=cap, endpoint=False)).astype(np.int64)
    return feats[:, torch.from_numpy(idx)]


def extract(
    image_path: str,
    spec: ExtractorSpec,
    out_path: str,
    weights_dir: str | None = None,
) -> dict:
    """Extract a feature volume from a scalar image.

    The input is z-scored over the whole volume, pushed through the frozen
    encoder under inference mode, capped to at most ``channel_cap`` channels,
    and written as a multi-channel MET_FLOAT MetaImage. With
    ``resample_to_input`` the written geometry equals the input geometry
    exactly; this is verified by re-reading the output.

    Args:
        image_path: scalar .mha input.
        spec: what to extract.
        out_path: .mha output.
        weights_dir: where weights live; defaults to FEATEX_WEIGHTS_DIR or
            ~/.cache/featex.

    Returns:
        Summary dict with model_id, layer_index, channels, dims, resampled.

    Raises:
        MissingWeightsError: weights file absent.
        LayerRangeError: layer_index outside the model's table.
        DataError: multi-channel input or non-finite features.
        GeometryError: resampled output geometry differs from the input.
    """
    vol = mio.read_mha(image_path)
    if vol.channels != 1:
        raise DataError(
            f"feature extraction expects a scalar image, got {vol.channels} channels"
        )

    table = layer_table(spec.model_id)
    if not 1 <= spec.layer_index <= len(table):
        raise LayerRangeError(
            f"model {spec.model_id!r} has layers 1..{len(table)}, "
            f"got {spec.layer_index}"
        )

    model = _load_model(spec.model_id, weights_dir)

    data = vol.data[..., 0].astype(np.float32)
    mean = float(data.mean())
    std = float(data.std())
    x = torch.from_numpy((data - mean) / max(std, 1e-6))[None, None]

    with torch.inference_mode():
        feats = model.layer_output(x, spec.layer_index)
        feats = _subsample_channels(feats, spec.channel_cap)
        nz, ny, nx = data.shape
        resampled = False
        if spec.resample_to_input and feats.shape[2:] != (nz, ny, nx):
            feats = F.interpolate(
                feats, size=(nz, ny, nx), mode="trilinear", align_corners=False
            )
            resampled = True

    arr = feats[0].permute(1, 2, 3, 0).contiguous().numpy().astype(np.float32)
    if not np.isfinite(arr).all():
        raise DataError("encoder produced non-finite feature values")

    if spec.resample_to_input:
        spacing = vol.spacing
        origin = vol.origin
    else:
        dx, dy, dz = table[spec.layer_index - 1]["downsample"]
        spacing = (vol.spacing[0] * dx, vol.spacing[1] * dy, vol.spacing[2] * dz)
        shift_vox = np.array(
            [
                _native_origin_shift(spec.model_id, dx) * vol.spacing[0],
                _native_origin_shift(spec.model_id, dy) * vol.spacing[1],
                _native_origin_shift(spec.model_id, dz) * vol.spacing[2],
            ]
        )
        origin = tuple(np.asarray(vol.origin) + vol.direction @ shift_vox)

    mio.write_mha(out_path, arr, spacing, origin, vol.direction, element_type="MET_FLOAT")

    if spec.resample_to_input:
        written = mio.read_mha(out_path)
        same = (
            written.dims == vol.dims
            and written.spacing == vol.spacing
            and written.origin == vol.origin
            and np.array_equal(written.direction, vol.direction)
        )
        if not same:
            raise GeometryError(
                f"output geometry {written.dims}/{written.spacing}/{written.origin} "
                f"does not match input {vol.dims}/{vol.spacing}/{vol.origin}"
            )

    return {
        "model_id": spec.model_id,
        "layer_index": spec.layer_index,
        "channels": int(arr.shape[3]),
        "dims": (int(arr.shape[2]), int(arr.shape[1]), int(arr.shape[0])),
        "resampled": resampled,
        "out": out_path,
    }


def available_models() -> tuple[str, ...]:
    return model_ids()
