"""Minimal MetaImage (.mha) reader and writer.

Supports the single-file dialect used by the registration engine: ASCII
``Key = Value`` header terminated by ``ElementDataFile = LOCAL``, followed
by an uncompressed little-endian binary payload in C order with the x index
fastest and channels innermost.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, HeaderError

_ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}

_INTEGER_RANGES = {
    "MET_UCHAR": (0, 255),
    "MET_SHORT": (-32768, 32767),
}

_HEADER_KEY_ORDER = (
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementType",
    "ElementSpacing",
    "Offset",
    "TransformMatrix",
    "ElementNumberOfChannels",
    "CompressedData",
    "ElementDataFile",
)


@dataclass
class MetaVolume:
    """A 3D multi-channel image with world geometry.

    Attributes:
        data: float32 array of shape (nz, ny, nx, channels).
        spacing: voxel size in mm, (x, y, z).
        origin: world position of voxel (0, 0, 0) in mm, (x, y, z).
        direction: 3x3 row-major direction cosine matrix.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    direction: np.ndarray

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as (nx, ny, nz), matching the header DimSize order."""
        nz, ny, nx = self.data.shape[:3]
        return (int(nx), int(ny), int(nz))


def _format_float(value: float) -> str:
    return np.format_float_positional(np.float64(value), unique=True, trim="-")


def _parse_floats(value: str, count: int, key: str) -> tuple[float, ...]:
    parts = value.split()
    if len(parts) != count:
        raise HeaderError(f"{key} expects {count} values, got {len(parts)}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise HeaderError(f"could not parse {key}: {value!r}") from exc


def _read_header(fh) -> dict[str, str]:
    header: dict[str, str] = {}
    while True:
        line = fh.readline()
        if not line:
            raise HeaderError("header ended before ElementDataFile")
        try:
            text = line.decode("ascii")
        except UnicodeDecodeError as exc:
            raise HeaderError("header contains non-ASCII bytes") from exc
        if "=" not in text:
            raise HeaderError(f"malformed header line: {text.strip()!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        header[key] = value.strip()
        if key == "ElementDataFile":
            return header


def read_mha(path: str) -> MetaVolume:
    """Load a MetaImage volume.

    Integer element types are converted to float32 on load; float payloads
    keep float32 precision.

    Args:
        path: file to read.

    Returns:
        MetaVolume with data shaped (nz, ny, nx, channels).

    Raises:
        HeaderError: unparseable or unsupported header.
        DataError: payload shorter than the header promises.
        FileNotFoundError: missing file.
    """
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()

    if header.get("ObjectType", "Image") != "Image":
        raise HeaderError(f"unsupported ObjectType {header['ObjectType']!r}")
    if header.get("NDims") != "3":
        raise HeaderError(f"only 3D volumes are supported, NDims={header.get('NDims')!r}")
    if header.get("ElementDataFile") != "LOCAL":
        raise HeaderError("only single-file volumes (ElementDataFile = LOCAL) are supported")
    if header.get("CompressedData", "False") == "True":
        raise HeaderError("compressed payloads are not supported")
    if header.get("BinaryData", "True") != "True":
        raise HeaderError("ASCII payloads are not supported")
    if header.get("BinaryDataByteOrderMSB", "False") != "False":
        raise HeaderError("big-endian payloads are not supported")

    element_type = header.get("ElementType", "")
    if element_type not in _ELEMENT_TYPES:
        raise HeaderError(f"unsupported ElementType {element_type!r}")
    dtype = _ELEMENT_TYPES[element_type]

    dims = _parse_floats(header.get("DimSize", ""), 3, "DimSize")
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 1:
        raise HeaderError(f"non-positive DimSize {dims}")
    channels = int(header.get("ElementNumberOfChannels", "1"))
    if channels < 1:
        raise HeaderError(f"non-positive ElementNumberOfChannels {channels}")

    spacing = _parse_floats(header.get("ElementSpacing", "1 1 1"), 3, "ElementSpacing")
    if min(spacing) <= 0:
        raise HeaderError(f"non-positive ElementSpacing {spacing}")
    origin = _parse_floats(header.get("Offset", "0 0 0"), 3, "Offset")
    if "TransformMatrix" in header:
        direction = np.asarray(
            _parse_floats(header["TransformMatrix"], 9, "TransformMatrix"), dtype=np.float64
        ).reshape(3, 3)
    else:
        direction = np.eye(3, dtype=np.float64)

    expected = nx * ny * nz * channels * dtype.itemsize
    if len(payload) < expected:
        raise DataError(f"payload holds {len(payload)} bytes, header promises {expected}")
    raw = np.frombuffer(payload[:expected], dtype=dtype)
    data = raw.reshape(nz, ny, nx, channels).astype(np.float32)
    return MetaVolume(data=data, spacing=spacing, origin=origin, direction=direction)


def write_mha(
    path: str,
    data: np.ndarray,
    spacing: tuple[float, float, float],
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
    direction: np.ndarray | None = None,
    element_type: str = "MET_FLOAT",
) -> None:
    """Write a MetaImage volume.

    Args:
        data: array of shape (nz, ny, nx) or (nz, ny, nx, channels).
        spacing: voxel size in mm, (x, y, z).
        origin: world position of voxel (0, 0, 0) in mm.
        direction: 3x3 direction cosines; identity when omitted.
        element_type: one of MET_UCHAR, MET_SHORT, MET_FLOAT, MET_DOUBLE.
            Integer types are rounded to nearest and range-checked.
    """
    if element_type not in _ELEMENT_TYPES:
        raise HeaderError(f"unsupported ElementType {element_type!r}")
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., np.newaxis]
    if arr.ndim != 4:
        raise DataError(f"expected a 3D or 4D array, got shape {arr.shape}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise HeaderError(f"invalid spacing {spacing}")
    if direction is None:
        direction = np.eye(3, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3, 3):
        raise HeaderError(f"direction must be 3x3, got {direction.shape}")

    dtype = _ELEMENT_TYPES[element_type]
    if element_type in _INTEGER_RANGES:
        lo, hi = _INTEGER_RANGES[element_type]
        rounded = np.rint(arr)
        if rounded.min() < lo or rounded.max() > hi:
            raise DataError(
                f"values [{arr.min()}, {arr.max()}] exceed {element_type} range [{lo}, {hi}]"
            )
        payload = rounded.astype(dtype)
    else:
        payload = arr.astype(dtype)

    nz, ny, nx, channels = arr.shape
    fields = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": f"{nx} {ny} {nz}",
        "ElementType": element_type,
        "ElementSpacing": " ".join(_format_float(s) for s in spacing),
        "Offset": " ".join(_format_float(o) for o in origin),
        "TransformMatrix": " ".join(_format_float(v) for v in direction.reshape(-1)),
        "CompressedData": "False",
        "ElementDataFile": "LOCAL",
    }
    if channels != 1:
        fields["ElementNumberOfChannels"] = str(channels)

    lines = [f"{key} = {fields[key]}\n" for key in _HEADER_KEY_ORDER if key in fields]
    tmp = path + ".part"
    with open(tmp, "wb") as fh:
        fh.write("".join(lines).encode("ascii"))
        fh.write(np.ascontiguousarray(payload).tobytes())
    os.replace(tmp, path)
