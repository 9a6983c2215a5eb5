"""
File formats: dense matrices (MatrixMarket, CSV, ``.npy``) and the binary
entry stream.

Entry-stream layout (little-endian): a 24-byte header ``magic "SMPS"``,
``version u32``, ``d u32``, ``n1 u32``, ``n2 u32``, ``reserved u32 (0)``,
followed by packed 17-byte records ``(u8 matrix_id, u32 row, u32 col, f64 value)``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .matrix_core import ENTRY_DTYPE, EntryStream, as_dense

__all__ = ["read_matrix", "write_matrix", "write_stream", "read_stream", "stream_header"]

STREAM_MAGIC = b"SMPS"
STREAM_VERSION = 1
_STREAM_HEADER = struct.Struct("<4sIIIII")
_RECORD = np.dtype(ENTRY_DTYPE)


def read_matrix(path):
    """Load a dense matrix from ``.mtx``, ``.csv`` or ``.npy``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".mtx":
        M = scipy.io.mmread(path)
        M = M.toarray() if sp.issparse(M) else np.asarray(M)
    elif suffix == ".csv":
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    elif suffix == ".npy":
        M = np.load(path)
    else:
        raise ValueError(f"unrecognised matrix format: {path.name}")
    return as_dense(M, path.name)


def write_matrix(path, M):
    """Write ``M`` as ``.mtx`` (coordinate), ``.csv`` or ``.npy`` by extension."""
    path = Path(path)
    M = as_dense(M)
    suffix = path.suffix.lower()
    if suffix == ".mtx":
        scipy.io.mmwrite(path, sp.coo_matrix(M), precision=17)
    elif suffix == ".csv":
        np.savetxt(path, M, delimiter=",", fmt="%.17g")
    elif suffix == ".npy":
        np.save(path, M)
    else:
        raise ValueError(f"unrecognised matrix format: {path.name}")


def write_stream(path, A, B, order="row", seed=None):
    """Write the nonzeros of A and B as a binary entry stream."""
    stream = EntryStream.from_dense(A, B, order=order, seed=seed)
    with open(path, "wb") as fh:
        fh.write(_STREAM_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, *stream.dims, 0))
        for block in stream.blocks():
            fh.write(np.asarray(block, dtype=_RECORD).tobytes())


def stream_header(path):
    """``(d, n1, n2)`` from a stream file header."""
    with open(path, "rb") as fh:
        return _parse_header(fh.read(_STREAM_HEADER.size), path)


def _parse_header(raw, path):
    if len(raw) != _STREAM_HEADER.size:
        raise ValueError(f"{path}: truncated stream header")
    magic, version, d, n1, n2, _ = _STREAM_HEADER.unpack(raw)
    if magic != STREAM_MAGIC:
        raise ValueError(f"{path}: not an entry-stream file")
    if version != STREAM_VERSION:
        raise ValueError(f"{path}: unsupported stream version {version}")
    return d, n1, n2


def read_stream(path, block_size=1 << 16) -> EntryStream:
    """
    Open a binary entry stream for a single pass.  The file is opened once,
    the header parsed, and the records read sequentially in blocks of
    ``block_size`` as the stream is consumed.
    """
    fh = open(path, "rb")
    try:
        dims = _parse_header(fh.read(_STREAM_HEADER.size), path)
    except Exception:
        fh.close()
        raise

    def blocks():
        with fh:
            while True:
                raw = fh.read(block_size * _RECORD.itemsize)
                if not raw:
                    return
                if len(raw) % _RECORD.itemsize:
                    raise ValueError(f"{path}: truncated entry record")
                yield np.frombuffer(raw, dtype=_RECORD)

    return EntryStream(dims, blocks(), block_size=block_size)
