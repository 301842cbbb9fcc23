"""MetaImage (.mha) reading and writing.

Single-file form only: an ASCII ``Key = Value`` header followed by a raw
little-endian voxel payload in the same file (``ElementDataFile = LOCAL``).
Write then read returns a volume with identical bytes for the supported
element types, so files are a stable interchange surface between tools.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    HeaderParseError,
    TruncatedDataError,
    UnsupportedFormatError,
    ValidationError,
)
from .volume import Geometry, Volume

_ELEMENT_DTYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}

# Keys are written in this order; readers that care about order get stable files.
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


def _fmt_float(x: float) -> str:
    """Shortest decimal string that round-trips the float64 exactly."""
    return np.format_float_positional(np.float64(x), unique=True, trim="-")


def _parse_header(raw: bytes, path: str):
    """Split the ASCII header off the payload; returns (dict, payload_offset)."""
    fields: dict[str, str] = {}
    pos = 0
    line_no = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise HeaderParseError(f"{path}: header ended without ElementDataFile")
        line = raw[pos:nl]
        pos = nl + 1
        line_no += 1
        try:
            text = line.decode("ascii").strip()
        except UnicodeDecodeError:
            raise HeaderParseError(f"{path}: non-ASCII bytes in header line {line_no}")
        if not text:
            continue
        if "=" not in text:
            raise HeaderParseError(f"{path}: malformed header line {line_no}: {text!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if key in fields:
            raise HeaderParseError(f"{path}: duplicate header key {key!r} (line {line_no})")
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos


def _ints(value: str, key: str, path: str) -> list[int]:
    try:
        return [int(v) for v in value.split()]
    except ValueError:
        raise HeaderParseError(f"{path}: {key} must be whitespace-separated integers, got {value!r}")


def _floats(value: str, key: str, path: str) -> list[float]:
    try:
        out = [float(v) for v in value.split()]
    except ValueError:
        raise HeaderParseError(f"{path}: {key} must be whitespace-separated numbers, got {value!r}")
    if not all(np.isfinite(out)):
        raise ValidationError(f"{path}: {key} contains non-finite values")
    return out


def load_mha(path: str) -> Volume:
    """Read a single-file MetaImage volume.

    Raises:
        HeaderParseError: structurally broken header.
        UnsupportedFormatError: valid MetaImage, but a variant out of scope
            (compression, external data file, non-3D, unknown element type).
        TruncatedDataError: payload shorter than the header promises.
        ValidationError: non-finite voxels or bad geometry values.
    """
    with open(path, "rb") as f:
        raw = f.read()
    fields, offset = _parse_header(raw, path)

    if fields.get("ObjectType", "Image") != "Image":
        raise UnsupportedFormatError(f"{path}: ObjectType {fields['ObjectType']!r} not supported")
    ndims = int(fields.get("NDims", "3"))
    if ndims != 3:
        raise UnsupportedFormatError(f"{path}: only 3D volumes supported, NDims={ndims}")
    if fields.get("CompressedData", "False").lower() == "true":
        raise UnsupportedFormatError(f"{path}: compressed payloads not supported")
    if fields.get("BinaryData", "True").lower() != "true":
        raise UnsupportedFormatError(f"{path}: ASCII payloads not supported")
    datafile = fields["ElementDataFile"]
    if datafile != "LOCAL":
        raise UnsupportedFormatError(
            f"{path}: only ElementDataFile = LOCAL supported, got {datafile!r}"
        )
    byte_order_msb = fields.get("ElementByteOrderMSB", fields.get("BinaryDataByteOrderMSB", "False"))
    if byte_order_msb.lower() == "true":
        raise UnsupportedFormatError(f"{path}: big-endian payloads not supported")

    if "DimSize" not in fields:
        raise HeaderParseError(f"{path}: missing DimSize")
    if "ElementType" not in fields:
        raise HeaderParseError(f"{path}: missing ElementType")
    dims = _ints(fields["DimSize"], "DimSize", path)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise HeaderParseError(f"{path}: DimSize must be three positive integers, got {dims}")
    nx, ny, nz = dims

    etype = fields["ElementType"]
    if etype not in _ELEMENT_DTYPES:
        raise UnsupportedFormatError(f"{path}: ElementType {etype!r} not supported")
    dtype = _ELEMENT_DTYPES[etype]

    channels = int(fields.get("ElementNumberOfChannels", "1"))
    if channels < 1:
        raise HeaderParseError(f"{path}: ElementNumberOfChannels must be >= 1, got {channels}")

    spacing = _floats(fields.get("ElementSpacing", "1 1 1"), "ElementSpacing", path)
    origin = _floats(fields.get("Offset", "0 0 0"), "Offset", path)
    dirvals = _floats(
        fields.get("TransformMatrix", "1 0 0 0 1 0 0 0 1"), "TransformMatrix", path
    )
    if len(spacing) != 3 or len(origin) != 3 or len(dirvals) != 9:
        raise HeaderParseError(f"{path}: geometry fields must have 3/3/9 entries")
    direction = np.array(dirvals, dtype=np.float64).reshape(3, 3)

    count = nx * ny * nz * channels
    payload = raw[offset:]
    need = count * dtype.itemsize
    if len(payload) < need:
        raise TruncatedDataError(
            f"{path}: payload has {len(payload)} bytes, header promises {need}"
        )
    flat = np.frombuffer(payload[:need], dtype=dtype)
    # Payload is x-fastest with channels innermost; that is exactly
    # C-order (z, y, x, c).
    data = flat.reshape(nz, ny, nx, channels)
    if data.dtype != np.float32 and data.dtype != np.float64:
        data = data.astype(np.float32)
    else:
        data = data.astype(data.dtype.newbyteorder("="))
    if not np.isfinite(data).all():
        raise ValidationError(f"{path}: voxel payload contains NaN/Inf")

    geom = Geometry(dims=(nx, ny, nz), spacing=tuple(spacing), origin=tuple(origin),
                    direction=direction)
    semantics = "feature" if channels > 1 else "normalized"
    return Volume(geometry=geom, data=data, element_semantics=semantics,
                  element_type=etype)


def write_mha(v: Volume, path: str, element_type: str | None = None) -> None:
    """Write a single-file MetaImage volume.

    Args:
        element_type: on-disk type; defaults to the volume's own. Values are
            cast with rounding for integer types; the caller is responsible
            for prior clipping to the type's range.
    """
    etype = element_type or v.element_type
    if etype not in _ELEMENT_DTYPES:
        raise UnsupportedFormatError(f"cannot write ElementType {etype!r}")
    dtype = _ELEMENT_DTYPES[etype]

    if not np.isfinite(v.data).all():
        raise ValidationError("refusing to write NaN/Inf voxels")

    nx, ny, nz = v.dims
    lines = []
    for key in _HEADER_KEY_ORDER:
        if key == "ObjectType":
            val = "Image"
        elif key == "NDims":
            val = "3"
        elif key == "DimSize":
            val = f"{nx} {ny} {nz}"
        elif key == "ElementType":
            val = etype
        elif key == "ElementSpacing":
            val = " ".join(_fmt_float(s) for s in v.spacing)
        elif key == "Offset":
            val = " ".join(_fmt_float(o) for o in v.origin)
        elif key == "TransformMatrix":
            val = " ".join(_fmt_float(x) for x in v.direction.reshape(-1))
        elif key == "ElementNumberOfChannels":
            if v.channels == 1:
                continue
            val = str(v.channels)
        elif key == "CompressedData":
            val = "False"
        elif key == "ElementDataFile":
            val = "LOCAL"
        lines.append(f"{key} = {val}\n")

    data = v.data
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        rounded = np.rint(data)
        if rounded.min() < info.min or rounded.max() > info.max:
            raise ValidationError(
                f"data range [{data.min()}, {data.max()}] does not fit {etype}"
            )
        payload = rounded.astype(dtype)
    else:
        payload = data.astype(dtype)

    with open(path, "wb") as f:
        f.write("".join(lines).encode("ascii"))
        f.write(np.ascontiguousarray(payload).tobytes())
