"""FSB (Feature/Signal Binary) matrix files.

Layout, little-endian: magic "ALGF", u32 version (=1), u64 n_rows,
u64 n_cols, u8 dtype (1 = float32), 7 reserved zero bytes, then
n_rows * n_cols float32 values row-major. Write-then-read round-trips
float32 data bit-exactly.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, TruncationError

MAGIC = b"ALGF"
VERSION = 1
DTYPE_FLOAT32 = 1

_HEADER = struct.Struct("<4sIQQB7s")
HEADER_SIZE = _HEADER.size


def write_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D array as float32 FSB."""
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise DataError(f"FSB stores 2-D matrices, got shape {m.shape}")
    header = _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], DTYPE_FLOAT32, b"\0" * 7)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    """Read an FSB file into a float32 (rows, cols) array.

    Raises FormatError on a bad magic/version/dtype, TruncationError when the
    payload length disagrees with the header, and DataError (naming the first
    offending row and column) on non-finite entries.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the FSB header")
    magic, version, n_rows, n_cols, dtype, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported FSB version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    expected = n_rows * n_cols * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    m = np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols)
    finite = np.isfinite(m)
    if not finite.all():
        r, c = np.argwhere(~finite)[0]
        raise DataError(f"{path}: non-finite entry at row {r}, col {c}")
    return m.copy()
