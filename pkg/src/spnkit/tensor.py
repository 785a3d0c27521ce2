"""Dense grid values, bilinear resizing, and bit-exact file formats.

A :class:`Map` is a (height, width, channels) float grid in row-major order,
32-bit by default with a 64-bit mode for oracle verification. Two file formats
are supported: a small binary tensor container ("SPNT") for exact round-trips,
and binary PGM/PPM images for 1- and 3-channel data.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError

MAX_ELEMENTS = 1 << 31
MAX_RANK = 8

_MAGIC = b"SPNT"
_VERSION = 1
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_WHITESPACE = (9, 10, 13, 32)


@dataclass(frozen=True)
class Map:
    """Immutable (height, width, channels) grid of float32 or float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if not isinstance(arr, np.ndarray) or arr.ndim != 3:
            raise DimensionError("map data must be a (height, width, channels) array")
        if arr.dtype not in (np.float32, np.float64):
            raise DimensionError(f"map dtype must be float32 or float64, got {arr.dtype}")
        if arr.size == 0:
            raise DimensionError("map dimensions must all be >= 1")
        if arr.size > MAX_ELEMENTS:
            raise DimensionError(f"map has {arr.size} entries, limit is {MAX_ELEMENTS}")
        if not np.isfinite(arr).all():
            raise DimensionError("map entries must all be finite")
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Map":
        return Map(self.data.astype(dtype))


def map_new(height: int, width: int, channels: int, fill: float = 0.0,
            dtype=np.float32) -> Map:
    """Create a constant map. All dimensions must be >= 1."""
    for name, d in (("height", height), ("width", width), ("channels", channels)):
        if int(d) != d or d < 1:
            raise DimensionError(f"{name} must be a positive integer, got {d}")
    if height * width * channels > MAX_ELEMENTS:
        raise DimensionError("requested map is too large")
    return Map(np.full((height, width, channels), fill, dtype=dtype))


def map_from_array(arr, dtype=None) -> Map:
    """Wrap an array-like as a Map, optionally converting the dtype."""
    a = np.asarray(arr)
    if dtype is not None:
        a = a.astype(dtype)
    elif a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    return Map(a)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation matrix of shape (n_out, n_in).

    Rows are convex weights; resizing to the same length is the exact identity.
    A single-sample output takes the first input sample.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError("interpolation sizes must be >= 1")
    r = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        r[:, 0] = 1.0
        return r
    if n_out == 1:
        r[0, 0] = 1.0
        return r
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        s = i * scale
        lo = min(int(np.floor(s)), n_in - 2)
        f = s - lo
        r[i, lo] = 1.0 - f
        r[i, lo + 1] += f
    return r


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array; computed in float64, cast back."""
    rh = interp_matrix(arr.shape[0], out_h)
    rw = interp_matrix(arr.shape[1], out_w)
    tmp = np.tensordot(rh, arr.astype(np.float64, copy=False), axes=(1, 0))
    out = np.tensordot(tmp, rw, axes=(1, 1))          # (out_h, C, out_w)
    return np.moveaxis(out, 2, 1).astype(arr.dtype)


def bilinear_resize(m: Map, out_h: int, out_w: int) -> Map:
    """Resize a map with corner-aligned bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("output dimensions must be >= 1")
    return Map(resize_array(m.data, out_h, out_w))


def write_array(path, arr: np.ndarray) -> None:
    """Write an array to the binary tensor container (bit-exact round trip)."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise DimensionError(f"only float32/float64 arrays are writable, got {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"rank must be in [1, {MAX_RANK}], got {arr.ndim}")
    if arr.size == 0:
        raise DimensionError("arrays with a zero dimension are not writable")
    header = _MAGIC + bytes([_VERSION, code, arr.ndim])
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def read_array(path) -> np.ndarray:
    """Read an array from the binary tensor container."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"truncated header at byte {len(data)}: magic incomplete")
    if data[:4] != _MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0")
    if len(data) < 7:
        raise FormatError(f"truncated header at byte {len(data)}")
    version, code, rank = data[4], data[5], data[6]
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unsupported dtype code {code} at byte 5")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} out of range at byte 6")
    need = 7 + 4 * rank
    if len(data) < need:
        raise FormatError(f"truncated dimension list at byte {len(data)}")
    dims = np.frombuffer(data, dtype="<u4", count=rank, offset=7)
    if (dims == 0).any():
        raise FormatError(f"zero dimension in header at byte {7 + 4 * int(np.argmin(dims))}")
    dt = _CODE_TO_DTYPE[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    got = len(data) - need
    if got != expected:
        raise FormatError(
            f"payload size mismatch at byte {need}: expected {expected} bytes, found {got}")
    arr = np.frombuffer(data, dtype=dt, offset=need).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def write_tensor(path, m: Map) -> None:
    write_array(path, m.data)


def read_tensor(path) -> Map:
    arr = read_array(path)
    if arr.ndim != 3:
        raise FormatError(f"expected a rank-3 map, file holds rank {arr.ndim}")
    return Map(arr)


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == 0x23:  # '#' comment runs to end of line
            while pos < n and data[pos] not in (10, 13):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of header at byte {start}")
    return data[start:pos], pos


def _int_token(data: bytes, pos: int) -> tuple[int, int]:
    tok, pos = _next_token(data, pos)
    if not tok.isdigit():
        raise FormatError(f"expected integer in header, got {tok!r} before byte {pos}")
    return int(tok), pos


def read_image_pnm(path) -> Map:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 into a [0, 1] map."""
    data = Path(path).read_bytes()
    magic, pos = _next_token(data, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"unsupported magic {magic!r} at byte 0")
    width, pos = _int_token(data, pos)
    height, pos = _int_token(data, pos)
    maxval, pos = _int_token(data, pos)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is accepted")
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be >= 1")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError(f"missing separator after maxval at byte {pos}")
    payload = data[pos + 1:]
    expected = height * width * channels
    if len(payload) != expected:
        raise FormatError(
            f"payload size mismatch at byte {pos + 1}: expected {expected} bytes, "
            f"found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Map(arr.astype(np.float32) / np.float32(255.0))


def write_image_pnm(path, m: Map) -> None:
    """Write a 1-channel map as PGM or a 3-channel map as PPM, maxval 255.

    Values are clamped to [0, 1] and quantized; a second read/write cycle is
    then exact.
    """
    if m.channels == 1:
        magic = "P5"
    elif m.channels == 3:
        magic = "P6"
    else:
        raise DimensionError(f"PNM images need 1 or 3 channels, map has {m.channels}")
    q = np.rint(np.clip(m.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"{magic}\n{m.width} {m.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())
