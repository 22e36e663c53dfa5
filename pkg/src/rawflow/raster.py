"""Bit-exact ".rt" raster files.

Layout: ``b"RTEN"`` | version u8 | dtype u8 | ndim u8 | dims (u32 LE each) |
row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("uint16"): 1}


class RasterFormatError(ValueError):
    """Raised when a file is not a valid raster or an array cannot be stored."""


def encode_raster(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype.newbyteorder("=")) if array.dtype.kind in "fu" else None
    if code is None:
        raise RasterFormatError(f"unsupported dtype {array.dtype}; use float32 or uint16")
    if array.ndim > 255:
        raise RasterFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODE_TO_DTYPE[code]).tobytes(order="C")
    return header + payload


def decode_raster(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise RasterFormatError("bad magic bytes")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise RasterFormatError(f"unsupported raster version {version}")
    if code not in _CODE_TO_DTYPE:
        raise RasterFormatError(f"unknown dtype code {code}")
    offset = 7 + 4 * ndim
    if len(blob) < offset:
        raise RasterFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 7)
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise RasterFormatError(
            f"payload is {len(blob) - offset} bytes, header implies {expected}"
        )
    out = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_raster(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_raster(array))
    except OSError as exc:
        raise OSError(f"cannot write raster {path}: {exc}") from exc


def read_raster(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc
    try:
        return decode_raster(blob)
    except RasterFormatError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc
