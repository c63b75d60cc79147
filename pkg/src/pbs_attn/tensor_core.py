"""Dense matrix substrate and the ``PBST`` binary tensor format.

Matrices are plain C-contiguous numpy arrays of ``float32`` or ``float64``;
this module only adds the shape checks, the stabilized row softmax, and the
on-disk format every other module reads and writes.

File layout (little-endian throughout)::

    offset  size        field
    0       4           magic  b"PBST"
    4       4   u32     version (currently 1)
    8       4   u32     dtype code: 0 = float32, 1 = float64
    12      4   u32     ndim (2 or 3)
    16      8*ndim u64  shape
    ...     payload     row-major values
"""

import os
import struct

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"PBST"
VERSION = 1
HEADER_PREFIX = struct.Struct("<4sIII")

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PRECISIONS = {"f32": np.float32, "f64": np.float64,
              "single": np.float32, "double": np.float64}


def resolve_dtype(precision):
    """Map ``"f32"``/``"f64"`` (or a numpy dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ShapeError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in _DTYPE_TO_CODE:
        raise ShapeError(f"unsupported element type {dt}")
    return dt


def default_tolerance(dtype):
    """Max-abs tolerance used for kernel equivalence at a given precision."""
    return 1e-5 if np.dtype(dtype) == np.float32 else 1e-10


def as_matrix(x, dtype=None, *, name="matrix", check_finite=False):
    """Return ``x`` as a C-contiguous 2-D float array, validating its shape."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _DTYPE_TO_CODE else np.float64
    arr = np.ascontiguousarray(arr, dtype=resolve_dtype(dtype))
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if check_finite and not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


def matmul_transposed(a, b):
    """``a @ b.T`` for row-major ``a`` (n x d) and ``b`` (m x d)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot contract {a.shape} with {b.shape} on the last axis")
    return a @ b.T


def softmax_rows(m, mask=None):
    """Row-wise softmax with max subtraction.

    ``mask`` is additive (entries 0 or ``-inf``). Rows with no admissible
    entry come back as zeros instead of NaN.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got {m.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != m.shape:
            raise ShapeError(f"mask shape {mask.shape} != scores shape {m.shape}")
        m = m + mask.astype(m.dtype, copy=False)
    row_max = m.max(axis=1, keepdims=True)
    dead = ~np.isfinite(row_max)
    row_max = np.where(dead, 0, row_max)
    e = np.exp(m - row_max)
    denom = e.sum(axis=1, keepdims=True)
    denom = np.where(dead | (denom == 0), 1, denom)
    out = e / denom
    out[dead[:, 0]] = 0
    return out


def write_tensor(path, tensor):
    t = np.asarray(tensor)
    if t.ndim not in (2, 3):
        raise ShapeError(f"tensor files hold 2-D or 3-D arrays, got ndim={t.ndim}")
    code = _DTYPE_TO_CODE.get(t.dtype)
    if code is None:
        raise ShapeError(f"unsupported element type {t.dtype}")
    header = HEADER_PREFIX.pack(MAGIC, VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_CODE_TO_DTYPE[code]).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def parse_tensor(buf):
    """Decode a ``PBST`` byte string; raises :class:`FormatError` on any defect."""
    buf = memoryview(buf)
    if len(buf) < HEADER_PREFIX.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", len(buf))
    magic, version, code, ndim = HEADER_PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}", 8)
    if ndim not in (2, 3):
        raise FormatError(f"ndim must be 2 or 3, got {ndim}", 12)
    shape_end = HEADER_PREFIX.size + 8 * ndim
    if len(buf) < shape_end:
        raise FormatError("truncated shape", len(buf))
    shape = struct.unpack_from(f"<{ndim}Q", buf, HEADER_PREFIX.size)
    dtype = _CODE_TO_DTYPE[code]
    expected = dtype.itemsize * int(np.prod(shape, dtype=object))
    actual = len(buf) - shape_end
    if actual != expected:
        raise FormatError(
            f"payload is {actual} bytes, header declares {expected}",
            shape_end + min(actual, expected))
    arr = np.frombuffer(buf, dtype=dtype, offset=shape_end).reshape(shape)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError("non-finite element", shape_end + bad * dtype.itemsize)
    return arr


def read_tensor(path):
    with open(path, "rb") as fh:
        return parse_tensor(fh.read())
