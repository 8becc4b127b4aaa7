"""FGT1 tensor files.

Layout: magic ``b"FGT1"``, u8 dtype code (1 = float32), u8 rank,
``rank`` little-endian u32 dims, then the row-major little-endian payload.
"""

import math
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"FGT1"
MAX_RANK = 32
DTYPE_F32 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


def dumps(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def loads(blob, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    blob = memoryview(blob)
    if bytes(blob[offset:offset + 4]) != MAGIC:
        raise FormatError(f"bad FGT1 magic at offset {offset}")
    if len(blob) < offset + 6:
        raise FormatError("truncated FGT1 header")
    code, rank = blob[offset + 4], blob[offset + 5]
    if code not in _DTYPES:
        raise FormatError(f"unknown FGT1 dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"FGT1 rank {rank} exceeds {MAX_RANK}")
    pos = offset + 6
    if len(blob) < pos + 4 * rank:
        raise FormatError("truncated FGT1 dims")
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    dtype = _DTYPES[code]
    nbytes = math.prod(dims) * dtype.itemsize  # exact: no int64 overflow on hostile dims
    if len(blob) < pos + nbytes:
        raise FormatError("truncated FGT1 payload")
    arr = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(dims).astype(np.float32)
    return arr, pos + nbytes


def save(path, array):
    atomic_write(path, dumps(array))


def load(path):
    with open(path, "rb") as f:
        blob = f.read()
    arr, end = loads(blob)
    if end != len(blob):
        raise FormatError(f"{path}: {len(blob) - end} trailing bytes")
    return arr


def atomic_write(path, data):
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
