"""Single-file parameter container.

Layout, all integers little-endian:

    bytes 0..3   magic b"RSEL"
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 header length in bytes
    header       UTF-8 JSON: {"tensors": [{"name", "shape", "dtype"}...],
                              "seed", "step", "meta"}
    payload      the tensors' values, C order, little-endian, concatenated
                 in header order; dtype is "<f4" (default when the field is
                 absent) or "<f8"

Round-trips are bitwise: load(save(p)) reproduces every parameter exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ParseError
from .network import Parameters

MAGIC = b"RSEL"
VERSION = 1


def save_parameters(path, params: Parameters, *, seed: int, step: int, meta: dict | None = None) -> None:
    tensors = []
    blobs = []
    for name, t in params.items():
        dtype = "<f8" if t.data.dtype == np.float64 else "<f4"
        arr = np.ascontiguousarray(t.data, dtype=dtype)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"tensors": tensors, "seed": int(seed), "step": int(step), "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_parameters(path) -> tuple[Parameters, dict]:
    """Returns (parameters, header dict). Raises ParseError on a bad file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a parameter container (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    header_len = struct.unpack("<I", raw[8:12])[0]
    if len(raw) < 12 + header_len:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: header is not valid JSON: {exc}") from None
    offset = 12 + header_len
    tensors: dict[str, ad.Tensor] = {}
    for entry in header.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        dtype = entry.get("dtype", "<f4")
        if dtype not in ("<f4", "<f8"):
            raise ParseError(f"{path}: tensor {entry['name']!r} has unsupported dtype {dtype!r}")
        itemsize = 4 if dtype == "<f4" else 8
        nbytes = int(np.prod(shape)) * itemsize if shape else itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ParseError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        tensors[entry["name"]] = ad.parameter(arr, dtype=arr.dtype)
        offset += nbytes
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Parameters(tensors), header
