"""Tensor (de)serialization: ``shape: d0 d1 ...`` header line + little-endian float64."""

from __future__ import annotations

from typing import BinaryIO

import numpy as np

from csasr.errors import UsageError


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(("shape: " + " ".join(str(d) for d in arr.shape)).rstrip().encode() + b"\n")
    fh.write(arr.tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    header = fh.readline().decode().rstrip("\n")
    if not header.startswith("shape:"):
        raise UsageError(f"expected a 'shape:' header line, got {header!r}")
    shape = tuple(int(d) for d in header[len("shape:"):].split())
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise UsageError(f"truncated tensor blob for shape {list(shape)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
