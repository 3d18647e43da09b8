"""Readers and preprocessing for externally supplied two-class datasets.

Binary container layout (all little-endian)::

    bytes 0..3    magic b"GMIX"
    bytes 4..7    u32 rows
    bytes 8..11   u32 cols
    bytes 12..15  u32 dtype code (8 = float64)
    bytes 16..    rows * cols values, row-major

Plain CSV files (no header, comma-separated floats) are also accepted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"GMIX"
DTYPE_F64 = 8
_HEADER = struct.Struct("<4sIII")


def write_gmix(path, data) -> None:
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.ndim != 2:
        raise ValueError("GMIX payload must be a matrix")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols, DTYPE_F64))
        fh.write(data.tobytes())


def read_gmix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: file shorter than the 16-byte GMIX header")
    magic, rows, cols, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if code != DTYPE_F64:
        raise ConfigError(f"{path}: unsupported dtype code {code} (only {DTYPE_F64} = float64)")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise ConfigError(f"{path}: payload holds {len(raw) - _HEADER.size} bytes, header implies {expected - _HEADER.size}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(float)


def read_csv_matrix(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: not a comma-separated float matrix ({exc})") from exc
    return data


def load_matrix(path) -> np.ndarray:
    """Read a GMIX container or, failing the magic check, a CSV file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(4)
    data = read_gmix(path) if head == MAGIC else read_csv_matrix(path)
    if data.size == 0:
        raise ConfigError(f"{path}: empty dataset")
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{path}: non-finite entries")
    return data


@dataclass(frozen=True)
class PreprocessReport:
    n: int
    rows_a: int
    rows_b: int
    trace_a: float
    trace_b: float
    t: float  # rescale applied to class b
    scale: float  # sqrt(n / trace_a)
    global_demean: bool


def preprocess_external(raw_a, raw_b, rng: np.random.Generator, nonzero_means: bool = False):
    """Map two raw classes to inputs ``sqrt(n / Tr_a) * x_bar + eps`` with labels +1 / -1.

    Each class is demeaned on its own (or both together with
    ``nonzero_means``), class b is rescaled by ``t = sqrt(Tr_a / Tr_b)`` so
    the traces agree, and standard normal noise is added.

    Returns ``(X, y, comp, report)`` with class a first; ``comp`` is 1 for
    class a and 2 for class b.
    """
    A = np.asarray(raw_a, dtype=float)
    B = np.asarray(raw_b, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] == 0 or B.shape[0] == 0:
        raise ConfigError("both classes need at least one sample")
    if A.shape[1] != B.shape[1]:
        raise ConfigError(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    n = A.shape[1]
    if nonzero_means:
        mu = np.vstack([A, B]).mean(axis=0)
        A, B = A - mu, B - mu
    else:
        A, B = A - A.mean(axis=0), B - B.mean(axis=0)
    tr_a = float(np.sum(A * A) / A.shape[0])
    tr_b = float(np.sum(B * B) / B.shape[0])
    if tr_a <= 0 or tr_b <= 0:
        raise ConfigError("a class has zero trace after demeaning")
    t = math.sqrt(tr_a / tr_b)
    scale = math.sqrt(n / tr_a)
    X = np.vstack([A, t * B]) * scale
    X += rng.standard_normal(X.shape)
    y = np.concatenate([np.ones(A.shape[0]), -np.ones(B.shape[0])])
    comp = np.concatenate([np.ones(A.shape[0], dtype=int), np.full(B.shape[0], 2)])
    report = PreprocessReport(n, A.shape[0], B.shape[0], tr_a, tr_b, t, scale, bool(nonzero_means))
    return X, y, comp, report
