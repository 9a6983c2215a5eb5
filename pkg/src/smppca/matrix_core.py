"""
Dense matrix helpers, the streaming entry model, and exact small-scale oracles.

Matrices are plain ``numpy.ndarray`` objects.  The only access path to A and B
in one-pass mode is an :class:`EntryStream`, a single-consumption iterator of
``(matrix_id, row, col, value)`` records delivered in numpy blocks.
"""
from __future__ import annotations

import enum
from typing import Callable, Iterable, Iterator, NamedTuple

import numpy as np

__all__ = [
    "MatrixId",
    "Entry",
    "ENTRY_DTYPE",
    "EntryStream",
    "StreamConsumedError",
    "ConvergenceError",
    "as_dense",
    "exact_product",
    "truncated_svd",
    "spectral_norm",
    "subspace_iteration",
]


class MatrixId(enum.IntEnum):
    A = 0
    B = 1


class Entry(NamedTuple):
    matrix_id: MatrixId
    row: int
    col: int
    value: float


# Same byte layout as a record of the binary entry-stream file (17 bytes, packed).
ENTRY_DTYPE = np.dtype([("mid", "u1"), ("row", "<u4"), ("col", "<u4"), ("value", "<f8")])


class StreamConsumedError(RuntimeError):
    """Raised when a single-pass stream is read a second time."""


class ConvergenceError(ArithmeticError):
    """An iterative method hit its iteration cap before reaching tolerance."""


def as_dense(M, name="matrix"):
    """Validate and return ``M`` as a finite 2-D float64 array."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains NaN or Inf")
    return M


class EntryStream:
    """
    One pass over the nonzero entries of A (d x n1) and B (d x n2).

    Parameters
    ----------
    dims : tuple (d, n1, n2)
    source : iterable
        Yields either :class:`Entry` tuples or structured arrays of
        ``ENTRY_DTYPE``.  Positions that never appear are zero.  Each
        ``(matrix_id, row, col)`` is expected at most once; duplicates are not
        detected.
    block_size : int
        Loose :class:`Entry` tuples are batched into blocks of this size.

    The stream can be iterated exactly once.  A second call to :meth:`blocks`
    or ``iter`` raises :class:`StreamConsumedError`.
    """

    def __init__(self, dims, source: Iterable, block_size: int = 1 << 16):
        d, n1, n2 = (int(x) for x in dims)
        if min(d, n1, n2) < 1:
            raise ValueError(f"stream dims must be positive, got {dims}")
        self.dims = (d, n1, n2)
        self._source = source
        self._block_size = int(block_size)
        self._consumed = False
        self.entries_read = 0

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _take(self):
        if self._consumed:
            raise StreamConsumedError("entry stream has already been consumed")
        self._consumed = True
        return self._source

    def _check(self, block):
        d, n1, n2 = self.dims
        if block.size == 0:
            return
        if np.any(block["mid"] > 1):
            raise ValueError("matrix_id must be 0 (A) or 1 (B)")
        if np.any(block["row"] >= d):
            raise IndexError(f"row index out of range for d={d}")
        ncols = np.where(block["mid"] == 0, n1, n2)
        if np.any(block["col"] >= ncols):
            raise IndexError("column index out of range")
        if not np.all(np.isfinite(block["value"])):
            raise ValueError("entry values must be finite")

    def blocks(self) -> Iterator[np.ndarray]:
        """Yield validated structured blocks of entries (single use)."""
        pending = []
        for item in self._take():
            if isinstance(item, np.ndarray):
                if pending:
                    yield self._emit(np.array(pending, dtype=ENTRY_DTYPE))
                    pending = []
                yield self._emit(np.asarray(item, dtype=ENTRY_DTYPE))
            else:
                mid, row, col, value = item
                pending.append((int(mid), int(row), int(col), float(value)))
                if len(pending) >= self._block_size:
                    yield self._emit(np.array(pending, dtype=ENTRY_DTYPE))
                    pending = []
        if pending:
            yield self._emit(np.array(pending, dtype=ENTRY_DTYPE))

    def _emit(self, block):
        self._check(block)
        self.entries_read += block.size
        return block

    def __iter__(self) -> Iterator[Entry]:
        for block in self.blocks():
            for mid, row, col, value in block.tolist():
                yield Entry(MatrixId(mid), row, col, value)

    @classmethod
    def from_dense(cls, A, B, order="row", seed=None, block_size=1 << 16):
        """
        Stream the nonzero entries of dense ``A`` and ``B``.

        ``order`` is ``"row"`` (row-major, A then B), ``"col"`` (column-major,
        A then B) or ``"shuffled"`` (A and B entries interleaved in a random
        order drawn from ``seed``).
        """
        A = as_dense(A, "A")
        B = as_dense(B, "B")
        if A.shape[0] != B.shape[0]:
            raise ValueError(f"A and B must have the same number of rows, got {A.shape[0]} and {B.shape[0]}")
        records = np.concatenate([_dense_records(A, 0, order), _dense_records(B, 1, order)])
        if order == "shuffled":
            records = records[np.random.default_rng(seed).permutation(records.size)]
        elif order not in ("row", "col"):
            raise ValueError(f"unknown order {order!r}")
        chunks = [records[i:i + block_size] for i in range(0, records.size, block_size)]
        return cls((A.shape[0], A.shape[1], B.shape[1]), chunks)

    def to_dense(self):
        """Consume the stream and reassemble ``(A, B)``."""
        d, n1, n2 = self.dims
        A = np.zeros((d, n1), order="F")
        B = np.zeros((d, n2), order="F")
        for block in self.blocks():
            a = block["mid"] == 0
            A[block["row"][a], block["col"][a]] = block["value"][a]
            B[block["row"][~a], block["col"][~a]] = block["value"][~a]
        return A, B


def _dense_records(M, mid, order):
    if order == "col":
        cols, rows = np.nonzero(M.T)
    else:
        rows, cols = np.nonzero(M)
    out = np.empty(rows.size, dtype=ENTRY_DTYPE)
    out["mid"] = mid
    out["row"] = rows
    out["col"] = cols
    out["value"] = M[rows, cols]
    return out


def exact_product(A, B):
    """Return ``A.T @ B`` (n1 x n2).  Desk-scale oracle only."""
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"dimension mismatch: A has {A.shape[0]} rows, B has {B.shape[0]}")
    return A.T @ B


def truncated_svd(M, r):
    """
    Best rank-``r`` approximation factors of ``M`` via a full dense SVD.

    Returns
    -------
    U : (rows, r) array with orthonormal columns
    S : (r,) nonincreasing singular values
    V : (cols, r) array with orthonormal columns
    """
    M = as_dense(M)
    r = int(r)
    if r < 0 or r > min(M.shape):
        raise ValueError(f"rank {r} exceeds matrix dimensions {M.shape}")
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    return U[:, :r], S[:r], Vt[:r].T


def _orth(X):
    Q, _ = np.linalg.qr(X)
    return Q


def subspace_iteration(matvec: Callable, rmatvec: Callable, shape, r, *, oversample=0,
                       tol=1e-9, max_iters=1000, seed=0):
    """
    Block power iteration for the top-``r`` singular triplets of an operator.

    ``matvec(X)`` must return ``M @ X`` and ``rmatvec(Y)`` must return
    ``M.T @ Y`` for 2-D blocks.  A Rayleigh-Ritz step on the current block is
    taken every iteration; iteration stops when the leading ``r`` Ritz values
    change by less than ``tol`` relative to the largest one.

    Returns ``(U, S, V, iterations, converged)``.
    """
    m, n = shape
    p = min(n, m, r + oversample)
    rng = np.random.default_rng(seed)
    V = _orth(rng.standard_normal((n, p)))
    prev = None
    S = np.zeros(r)
    U = np.zeros((m, r))
    for it in range(1, max_iters + 1):
        Y = matvec(V)
        Q = _orth(Y)
        Z = rmatvec(Q)  # n x p, Z.T = Q.T M
        Ub, S_all, Vbt = np.linalg.svd(Z.T, full_matrices=False)
        S = S_all[:r]
        U = Q @ Ub[:, :r]
        V_full = Vbt.T
        top = S_all[0] if S_all.size else 0.0
        if top == 0.0:
            return np.zeros((m, r)), np.zeros(r), np.zeros((n, r)), it, True
        if prev is not None and np.max(np.abs(S - prev)) <= tol * top:
            return U, S, V_full[:, :r], it, True
        prev = S
        V = _orth(Z)
    return U, S, V_full[:, :r], max_iters, False


def spectral_norm(M, tol=1e-9, max_iters=5000, seed=0, block=4):
    """
    Power-iteration estimate of the spectral norm ``||M||_2``.

    A small block (default 4 vectors) with a fixed-seed random start is
    iterated on ``M.T M``; the block keeps convergence fast when the leading
    singular values are clustered.  Raises :class:`ConvergenceError` if the
    estimate has not settled to relative tolerance ``tol`` after
    ``max_iters`` iterations.
    """
    M = as_dense(M)
    if M.size == 0:
        raise ValueError("spectral_norm of an empty matrix")
    if not np.any(M):
        return 0.0
    _, S, _, _, ok = subspace_iteration(lambda X: M @ X, lambda Y: M.T @ Y, M.shape, 1,
                                        oversample=block - 1, tol=tol, max_iters=max_iters, seed=seed)
    if not ok:
        raise ConvergenceError(f"spectral_norm did not converge in {max_iters} iterations")
    return float(S[0])
