"""
Sketching operators and the one-pass accumulation of a :class:`SketchSummary`.

Exactness
---------
Every sketch operator is ``scale * P`` where ``P`` has small integer entries
(Gaussian entries are rounded to a grid of ``2**-GAUSS_FRAC_BITS``; SRHT
entries are +-1).  Incoming values are split into pieces aligned to fixed
binary bins of width ``bin_bits``, so every product ``P[a, row] * piece`` is
an integer multiple of the bin quantum that fits comfortably in 53 bits.
Per-bin float64 accumulators therefore hold *exact* integer sums no matter
how the additions are ordered or grouped.  The final sketch is formed by
adding the bins in a fixed order.  Consequences:

* ingest is bitwise independent of the entry order and of block boundaries,
* merging shard summaries is exactly associative and commutative,
* column squared norms are exact sums of the (rounded) squared values.
"""
from __future__ import annotations

import enum
import hashlib
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .matrix_core import ENTRY_DTYPE, EntryStream, as_dense

__all__ = [
    "SketchKind",
    "SketchOperator",
    "SketchSummary",
    "SketchAccumulator",
    "apply_column",
    "ingest",
    "ingest_dense",
    "exact_col_sq",
    "merge",
    "zero_summary",
    "save_summary",
    "load_summary",
]

GAUSS_FRAC_BITS = 12
GAUSS_INT_BITS = 17  # signed magnitude bound 2**16 => |z| < 16 standard deviations

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class SketchKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SRHT = "srht"


def _splitmix64(x):
    """Vectorised SplitMix64 finaliser on uint64 arrays (wraps mod 2**64)."""
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _uniform53(bits):
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _row_keys(seed, rows, salt):
    base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(salt))
    with np.errstate(over="ignore"):
        return _splitmix64(base + np.asarray(rows, dtype=np.uint64) * np.uint64(0xD1B54A32D192ED03))


@dataclass(frozen=True)
class SketchOperator:
    """
    A k x d random linear map, fully determined by ``(kind, k, d, seed)``.

    Nothing of size k x d is stored.  Gaussian columns are regenerated from a
    counter-based hash of ``(seed, row)``; SRHT keeps only the k sampled
    Hadamard rows and regenerates the random signs from the same hash.
    """

    kind: SketchKind
    k: int
    d: int
    seed: int = 0
    _srht_rows: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", SketchKind(self.kind))
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        if self.k < 1 or self.d < 1:
            raise ValueError(f"sketch needs k >= 1 and d >= 1, got k={self.k}, d={self.d}")
        rows = None
        if self.kind is SketchKind.SRHT:
            if self.k > self.d:
                raise ValueError(f"SRHT requires k <= d, got k={self.k}, d={self.d}")
            rng = np.random.Generator(np.random.Philox(key=self.seed))
            rows = np.sort(rng.choice(self.d_pad, size=self.k, replace=False)).astype(np.uint64)
        object.__setattr__(self, "_srht_rows", rows)

    @property
    def d_pad(self) -> int:
        return 1 << max(0, (self.d - 1).bit_length())

    @property
    def scale(self) -> float:
        """Multiplier turning the integer operator into the real one."""
        if self.kind is SketchKind.GAUSSIAN:
            return 2.0 ** -GAUSS_FRAC_BITS / math.sqrt(self.k)
        return 1.0 / math.sqrt(self.k)

    @property
    def int_bits(self) -> int:
        return GAUSS_INT_BITS if self.kind is SketchKind.GAUSSIAN else 1

    @property
    def bin_bits(self) -> int:
        """Width of the exact accumulation bins for this operator."""
        depth = (self.d_pad if self.kind is SketchKind.SRHT else self.d).bit_length()
        return max(8, min(24, 52 - depth - self.int_bits))

    @property
    def fingerprint(self) -> str:
        raw = f"{self.kind.value}|{self.k}|{self.d}|{self.seed}|g{GAUSS_FRAC_BITS}".encode()
        return hashlib.sha256(raw).hexdigest()[:32]

    def int_columns(self, rows):
        """Integer-valued columns ``P[:, rows]`` as a float64 (k, len(rows)) array."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.d):
            raise IndexError(f"row index out of range for d={self.d}")
        if self.kind is SketchKind.GAUSSIAN:
            return self._gauss_columns(rows)
        return self._srht_columns(rows)

    def _gauss_columns(self, rows):
        half = (self.k + 1) // 2
        keys = _row_keys(self.seed, rows, 0x5EED)[None, :]
        ctr = np.arange(2 * half, dtype=np.uint64)[:, None]
        with np.errstate(over="ignore"):
            u = _uniform53(_splitmix64(keys + ctr * np.uint64(0x9E3779B97F4A7C15)))
        rad = np.sqrt(-2.0 * np.log(u[:half]))
        ang = 2.0 * np.pi * u[half:]
        z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[: self.k]
        lim = 2.0 ** (GAUSS_INT_BITS - 1) - 1
        return np.clip(np.rint(z * 2.0 ** GAUSS_FRAC_BITS), -lim, lim)

    def _signs(self, rows):
        bits = _row_keys(self.seed, rows, 0x51C4) >> np.uint64(63)
        return 1.0 - 2.0 * bits.astype(np.float64)

    def _srht_columns(self, rows):
        parity = np.bitwise_count(self._srht_rows[:, None] & rows.astype(np.uint64)[None, :]) & 1
        return (1.0 - 2.0 * parity) * self._signs(rows)[None, :]

    def matrix(self):
        """Materialise the real k x d operator (small d only; for testing)."""
        return self.scale * self.int_columns(np.arange(self.d))


def _split_bins(values, width):
    """
    Split nonzero finite ``values`` into bin-aligned integer pieces.

    Returns ``(index, bin, coeff)`` with ``values[index] == sum(coeff * 2**(bin*width))``
    where every ``|coeff| < 2**width``.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.nonzero(values)[0]
    r = values[idx]
    _, e = np.frexp(r)  # |r| < 2**e
    b = np.floor_divide(e - 1, width)
    out_i, out_b, out_c = [], [], []
    while r.size:
        q = np.trunc(np.ldexp(r, -b * width))
        out_i.append(idx)
        out_b.append(b)
        out_c.append(q)
        r = r - np.ldexp(q, b * width)
        keep = r != 0
        idx, r, b = idx[keep], r[keep], b[keep] - 1
    if not out_i:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty.astype(np.int64), empty
    return np.concatenate(out_i), np.concatenate(out_b), np.concatenate(out_c)


def _add_bins(dst, src):
    for b, arr in src.items():
        if b in dst:
            dst[b] = dst[b] + arr
        else:
            dst[b] = arr.copy()


def _collapse(bins, width, shape, scale=1.0):
    out = np.zeros(shape, order="F")
    for b in sorted(bins):
        out += np.ldexp(bins[b], b * width)
    return out * scale if scale != 1.0 else out


class SketchAccumulator:
    """Mutable one-pass state; call :meth:`update` per block, then :meth:`finalize`."""

    def __init__(self, op: SketchOperator, n1: int, n2: int):
        self.op = op
        self.n = (int(n1), int(n2))
        self.sk_bins = ({}, {})
        self.sq_bins = ({}, {})

    def update(self, block):
        block = np.asarray(block, dtype=ENTRY_DTYPE)
        for mid in (0, 1):
            sel = block[block["mid"] == mid]
            if sel.size:
                self._update_matrix(mid, sel["row"].astype(np.int64), sel["col"].astype(np.int64),
                                    sel["value"])

    def _update_matrix(self, mid, rows, cols, values):
        op, n, w = self.op, self.n[mid], self.op.bin_bits
        if rows.size and rows.max() >= op.d:
            raise IndexError(f"row index out of range for d={op.d}")
        ent, bins, coeff = _split_bins(values, w)
        if ent.size == 0:
            return
        urows, inv = np.unique(rows, return_inverse=True)
        P = op.int_columns(urows)
        for b in np.unique(bins):
            m = bins == b
            S = sp.csr_matrix((coeff[m], (inv[ent[m]], cols[ent[m]])), shape=(urows.size, n))
            contrib = np.asarray((S.T @ P.T).T)
            acc = self.sk_bins[mid]
            if int(b) in acc:
                acc[int(b)] += contrib
            else:
                acc[int(b)] = np.asfortranarray(contrib)
        sq_i, sq_b, sq_c = _split_bins(values * values, w)
        acc = self.sq_bins[mid]
        for b in np.unique(sq_b):
            m = sq_b == b
            part = np.bincount(cols[sq_i[m]], weights=sq_c[m], minlength=n)
            if int(b) in acc:
                acc[int(b)] += part
            else:
                acc[int(b)] = part

    def finalize(self) -> "SketchSummary":
        return SketchSummary(op=self.op, n1=self.n[0], n2=self.n[1],
                             sk_bins=({**self.sk_bins[0]}, {**self.sk_bins[1]}),
                             sq_bins=({**self.sq_bins[0]}, {**self.sq_bins[1]}))


class SketchSummary:
    """
    Product of the single pass: ``A_sketch = Pi A`` (k x n1), ``B_sketch = Pi B``
    (k x n2), exact column norms and squared Frobenius norms of A and B.

    Holds the exact per-bin accumulators so summaries built from disjoint
    entry sets can be merged without rounding.  Treat as immutable.
    """

    def __init__(self, op, n1, n2, sk_bins, sq_bins):
        self.op = op
        self.dims = (op.d, int(n1), int(n2))
        self.operator_fingerprint = op.fingerprint
        self._sk_bins = sk_bins
        self._sq_bins = sq_bins
        k, w = op.k, op.bin_bits
        self.A_sketch = _collapse(sk_bins[0], w, (k, n1), op.scale)
        self.B_sketch = _collapse(sk_bins[1], w, (k, n2), op.scale)
        self.a_col_sq = _collapse(sq_bins[0], w, (n1,))
        self.b_col_sq = _collapse(sq_bins[1], w, (n2,))
        self.a_col_norms = np.sqrt(self.a_col_sq)
        self.b_col_norms = np.sqrt(self.b_col_sq)
        self.a_frob_sq = float(np.sum(self.a_col_sq))
        self.b_frob_sq = float(np.sum(self.b_col_sq))
        self._lock = threading.Lock()
        self._sketch_norms = None

    @property
    def sketch_col_norms(self):
        """Cached ``(||A_sketch_i||, ||B_sketch_j||)``; computed once on first use."""
        if self._sketch_norms is None:
            with self._lock:
                if self._sketch_norms is None:
                    At, Bt = self.A_sketch.T, self.B_sketch.T
                    self._sketch_norms = (np.sqrt(np.sum(At * At, axis=1)),
                                          np.sqrt(np.sum(Bt * Bt, axis=1)))
        return self._sketch_norms

    def __eq__(self, other):
        if not isinstance(other, SketchSummary):
            return NotImplemented
        return (self.operator_fingerprint == other.operator_fingerprint and self.dims == other.dims
                and np.array_equal(self.A_sketch, other.A_sketch)
                and np.array_equal(self.B_sketch, other.B_sketch)
                and np.array_equal(self.a_col_sq, other.a_col_sq)
                and np.array_equal(self.b_col_sq, other.b_col_sq))

    __hash__ = None

    def __repr__(self):
        d, n1, n2 = self.dims
        return f"SketchSummary(kind={self.op.kind.value}, k={self.op.k}, d={d}, n1={n1}, n2={n2})"


def zero_summary(op: SketchOperator, n1: int, n2: int) -> SketchSummary:
    return SketchAccumulator(op, n1, n2).finalize()


def apply_column(op: SketchOperator, row: int, value: float, target_column: np.ndarray):
    """``target_column += value * Pi[:, row]`` in place (plain float arithmetic)."""
    if not 0 <= row < op.d:
        raise IndexError(f"row {row} out of range for d={op.d}")
    if value != 0.0:
        target_column += (value * op.scale) * op.int_columns([row])[:, 0]
    return target_column


def ingest(stream: EntryStream, op: SketchOperator) -> SketchSummary:
    """Single sequential pass over ``stream`` producing its :class:`SketchSummary`."""
    d, n1, n2 = stream.dims
    if d != op.d:
        raise ValueError(f"stream has d={d} but the sketch operator expects d={op.d}")
    acc = SketchAccumulator(op, n1, n2)
    for block in stream.blocks():
        acc.update(block)
    return acc.finalize()


def _fwht(X):
    """Unnormalised Walsh-Hadamard transform along axis 0 (length a power of two)."""
    n = X.shape[0]
    h = 1
    X = X.copy()
    while h < n:
        Y = X.reshape(n // (2 * h), 2, h, -1)
        top = Y[:, 0] + Y[:, 1]
        bot = Y[:, 0] - Y[:, 1]
        X = np.stack([top, bot], axis=1).reshape(n, -1)
        h *= 2
    return X


def _dense_pieces(M, width):
    """Yield ``(bin, coeff)`` with ``M == sum(coeff * 2**(bin*width))`` elementwise."""
    R = np.array(M, dtype=np.float64)
    nz = R[R != 0]
    if nz.size == 0:
        return
    b = int(np.floor_divide(np.frexp(np.max(np.abs(nz)))[1] - 1, width))
    while np.any(R):
        Q = np.trunc(np.ldexp(R, -b * width))
        if np.any(Q):
            R -= np.ldexp(Q, b * width)
            yield b, Q
        b -= 1


def _dense_bins(op, M, row_chunk=4096):
    """Exact per-bin sketch accumulators for a dense d x n block."""
    w = op.bin_bits
    out = {}
    for b, Q in _dense_pieces(M, w):
        if op.kind is SketchKind.SRHT:
            X = np.zeros((op.d_pad, M.shape[1]))
            X[: op.d] = Q * op._signs(np.arange(op.d))[:, None]
            out[b] = np.asfortranarray(_fwht(X)[op._srht_rows.astype(np.int64)])
        else:
            acc = np.zeros((op.k, M.shape[1]), order="F")
            for lo in range(0, op.d, row_chunk):
                rows = np.arange(lo, min(op.d, lo + row_chunk))
                acc += op.int_columns(rows) @ Q[rows]
            out[b] = acc
    sq = {b: Q.sum(axis=0) for b, Q in _dense_pieces(M * M, w)}
    return out, sq


def ingest_dense(A, B, op: SketchOperator) -> SketchSummary:
    """
    Buffered-column path: sketch fully materialised ``A`` and ``B``.

    For SRHT this uses the fast Walsh-Hadamard transform (O(n d log d)); the
    Gaussian path is a dense product.  The result is bitwise equal to
    :func:`ingest` over the same nonzero entries, in any order.
    """
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    if A.shape[0] != op.d or B.shape[0] != op.d:
        raise ValueError(f"inputs must have d={op.d} rows")
    a_sk, a_sq = _dense_bins(op, A)
    b_sk, b_sq = _dense_bins(op, B)
    return SketchSummary(op, A.shape[1], B.shape[1], (a_sk, b_sk), (a_sq, b_sq))


def exact_col_sq(M, width):
    """Column squared norms of a dense matrix, summed exactly as in a summary with ``bin_bits == width``."""
    M = as_dense(M)
    return _collapse({b: Q.sum(axis=0) for b, Q in _dense_pieces(M * M, width)}, width, (M.shape[1],))


def merge(s1: SketchSummary, s2: SketchSummary) -> SketchSummary:
    """Combine summaries of disjoint entry sets (exact, associative, commutative)."""
    if s1.operator_fingerprint != s2.operator_fingerprint:
        raise ValueError("cannot merge summaries built with different sketch operators")
    if s1.dims != s2.dims:
        raise ValueError(f"cannot merge summaries with dims {s1.dims} and {s2.dims}")
    sk = ({}, {})
    sq = ({}, {})
    for s in (s1, s2):
        for mid in (0, 1):
            _add_bins(sk[mid], s._sk_bins[mid])
            _add_bins(sq[mid], s._sq_bins[mid])
    return SketchSummary(s1.op, s1.dims[1], s1.dims[2], sk, sq)


# -- binary file format ---------------------------------------------------
# header: magic "SMPK", version u32, kind u32 (0 gaussian, 1 srht), k u32,
#         d u32, n1 u32, n2 u32, seed u64, fingerprint (32 ascii bytes)
# then four bin groups (A sketch, B sketch, A col sq, B col sq), each:
#         count u32, then per bin: index i32 followed by raw <f8 data
#         (sketch blocks in column-major order).

_MAGIC = b"SMPK"
_HEADER = struct.Struct("<4sIIIIIIQ32s")


def save_summary(summary: SketchSummary, path):
    op = summary.op
    d, n1, n2 = summary.dims
    kind = 0 if op.kind is SketchKind.GAUSSIAN else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, kind, op.k, d, n1, n2, op.seed,
                              summary.operator_fingerprint.encode("ascii")))
        for group in (*summary._sk_bins, *summary._sq_bins):
            fh.write(struct.pack("<I", len(group)))
            for b in sorted(group):
                fh.write(struct.pack("<i", b))
                fh.write(np.asarray(group[b], dtype="<f8").tobytes(order="F"))


def load_summary(path) -> SketchSummary:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, kind, k, d, n1, n2, seed, fp = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a sketch summary file")
    op = SketchOperator(SketchKind.GAUSSIAN if kind == 0 else SketchKind.SRHT, k, d, seed)
    if op.fingerprint != fp.decode("ascii"):
        raise ValueError(f"{path}: operator fingerprint mismatch")
    pos = _HEADER.size
    groups = []
    for shape in ((k, n1), (k, n2), (n1,), (n2,)):
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        group = {}
        size = int(np.prod(shape))
        for _ in range(count):
            (b,) = struct.unpack_from("<i", raw, pos)
            pos += 4
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
            group[b] = np.array(arr.reshape(shape, order="F"), order="F")
            pos += 8 * size
        groups.append(group)
    return SketchSummary(op, n1, n2, (groups[0], groups[1]), (groups[2], groups[3]))
