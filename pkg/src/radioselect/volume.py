"""3D volumes: NPY parsing/writing, resizing, intensity normalization.

Axis convention everywhere: (depth, height, width) = (z, y, x), C-order.
Resize uses the align-corners-false convention with edge-clamped sampling,
so the output intensity range is always contained in the input range.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError

NPY_MAGIC = b"\x93NUMPY"

_SUPPORTED_DTYPES = {"<f4": np.float32, "<f8": np.float64, "|u1": np.uint8}


@dataclass
class Volume:
    """A dense scalar field over a (D, H, W) voxel grid.

    ``spacing`` is millimetres per voxel along (z, y, x); it scales the
    physical quantities (volumes, areas, distances) downstream.
    """

    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float32)
        if arr.ndim != 3:
            raise InputError(f"volume must be 3-D, got shape {arr.shape}")
        if any(s < 1 for s in arr.shape):
            raise InputError(f"volume extents must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("volume intensities must be finite")
        self.intensities = arr
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def copy(self) -> "Volume":
        return Volume(self.intensities.copy(), self.spacing)


def parse_npy(data: bytes) -> Volume:
    """Parse NPY (format version 1.0) bytes into a Volume.

    Accepts C-order, little-endian float32/float64 or uint8 payloads with a
    3-D shape; anything else raises a ParseError naming the offending part.
    """
    if len(data) < 10 or data[:6] != NPY_MAGIC:
        raise ParseError("not an NPY file: bad magic")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise ParseError(f"unsupported NPY version {major}.{minor}")
    (header_len,) = struct.unpack("<H", data[8:10])
    header_end = 10 + header_len
    if len(data) < header_end:
        raise ParseError("truncated NPY header")
    try:
        header = ast.literal_eval(data[10:header_end].decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except Exception as exc:
        raise ParseError(f"malformed NPY header: {exc}") from exc
    if fortran:
        raise ParseError("Fortran-order NPY arrays are not supported")
    if descr not in _SUPPORTED_DTYPES:
        raise ParseError(f"unsupported NPY dtype {descr!r}")
    if len(shape) != 3:
        raise ParseError(f"expected a 3-D array, got shape {shape}")
    dtype = _SUPPORTED_DTYPES[descr]
    count = int(np.prod(shape)) if shape else 1
    payload_bytes = data[header_end:]
    if len(payload_bytes) < count * np.dtype(dtype).itemsize:
        raise ParseError("NPY payload shorter than declared shape")
    payload = np.frombuffer(payload_bytes, dtype=dtype, count=count)
    return Volume(payload.reshape(shape).astype(np.float32))


def write_npy(volume: Volume) -> bytes:
    """Serialize a Volume as a version-1.0 NPY file (float32, C-order).

    Round-trips bitwise through ``parse_npy`` and is readable by numpy.
    """
    arr = np.ascontiguousarray(volume.intensities, dtype=np.float32)
    shape_str = "(" + ", ".join(str(s) for s in arr.shape) + ")"
    header = f"{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}"
    # total header size (magic..newline) padded to a multiple of 64
    base = len(NPY_MAGIC) + 4 + len(header) + 1
    pad = (64 - base % 64) % 64
    header = header + " " * pad + "\n"
    out = bytearray()
    out += NPY_MAGIC
    out += bytes([1, 0])
    out += struct.pack("<H", len(header))
    out += header.encode("latin1")
    out += arr.tobytes(order="C")
    return bytes(out)


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return parse_npy(fh.read())


def save_volume(path, volume: Volume) -> None:
    with open(path, "wb") as fh:
        fh.write(write_npy(volume))


def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample positions for one axis: align-corners-false with edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    # samples beyond the edge clamp to the edge voxel exactly
    frac = np.where(src < 0, 0.0, frac)
    frac = np.where(src > n_in - 1, 0.0, frac)
    return lo, hi, frac


def resize_trilinear(volume: Volume, target: tuple[int, int, int]) -> Volume:
    """Resize to ``target`` extents with separable trilinear interpolation."""
    if any(int(t) < 1 for t in target):
        raise InputError(f"target extents must be >= 1, got {target}")
    target = tuple(int(t) for t in target)
    if target == volume.extents:
        return volume.copy()
    data = volume.intensities.astype(np.float64)
    for axis, n_out in enumerate(target):
        n_in = data.shape[axis]
        if n_out == n_in:
            continue
        lo, hi, frac = _axis_coords(n_out, n_in)
        lo_v = np.take(data, lo, axis=axis)
        hi_v = np.take(data, hi, axis=axis)
        shape = [1] * data.ndim
        shape[axis] = n_out
        f = frac.reshape(shape)
        data = lo_v * (1.0 - f) + hi_v * f
    return Volume(data.astype(np.float32), volume.spacing)


def block_mean(volume: Volume, target: tuple[int, int, int]) -> Volume:
    """Downsample by averaging disjoint blocks; every target extent must
    divide the source extent.

    Every source voxel contributes to exactly one output voxel, so unlike
    point-sampling interpolation this cannot alias away structures thinner
    than the sampling stride."""
    target = tuple(int(t) for t in target)
    if any(t < 1 for t in target):
        raise InputError(f"target extents must be >= 1, got {target}")
    extents = volume.extents
    if any(e % t for e, t in zip(extents, target)):
        raise InputError(f"target {target} must divide the volume extents {extents}")
    tz, ty, tx = target
    data = volume.intensities.astype(np.float64).reshape(
        tz, extents[0] // tz, ty, extents[1] // ty, tx, extents[2] // tx)
    return Volume(data.mean(axis=(1, 3, 5)).astype(np.float32), volume.spacing)


def normalize_intensity(volume: Volume) -> Volume:
    """Min-max scale intensities to [0, 1]; constant volumes map to zeros."""
    arr = volume.intensities
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return Volume(np.zeros_like(arr), volume.spacing)
    return Volume((arr - lo) / (hi - lo), volume.spacing)
