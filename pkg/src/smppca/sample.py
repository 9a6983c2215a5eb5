"""
Biased entrywise sampling of A^T B from column norms.

Entry ``(i, j)`` gets the expected-count weight::

    q_ij = m * (||A_i||^2 / (2 n2 ||A||_F^2) + ||B_j||^2 / (2 n1 ||B||_F^2))

so that ``sum_ij q_ij == m`` and the inclusion probability is
``min(1, q_ij)``.  Two samplers are provided: an O(n1 n2) binomial oracle and
a row-wise sampler that runs in O(n1 + m log n2) with the same marginals.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .estimate import EstimatorKind, estimate_pairs
from .sketch import SketchSummary

__all__ = [
    "SampleDistribution",
    "SampleSet",
    "q_of",
    "q_matrix",
    "sample_binomial",
    "sample_fast",
    "row_draws",
    "build_sample_set",
    "save_samples_csv",
    "load_samples_csv",
    "save_samples_bin",
    "load_samples_bin",
]


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True, eq=False)
class SampleDistribution:
    """Everything needed to evaluate ``q_ij``; build with :meth:`from_summary` or :meth:`from_norms`."""

    m: float
    a_col_sq: np.ndarray
    b_col_sq: np.ndarray
    a_frob_sq: float
    b_frob_sq: float
    b_prefix_sums: np.ndarray

    @classmethod
    def from_norms(cls, m, a_col_sq, b_col_sq, a_frob_sq=None, b_frob_sq=None):
        a = np.asarray(a_col_sq, dtype=np.float64)
        b = np.asarray(b_col_sq, dtype=np.float64)
        if m < 0:
            raise ValueError(f"sample budget m must be nonnegative, got {m}")
        if np.any(a < 0) or np.any(b < 0):
            raise ValueError("squared column norms must be nonnegative")
        fa = float(np.sum(a)) if a_frob_sq is None else float(a_frob_sq)
        fb = float(np.sum(b)) if b_frob_sq is None else float(b_frob_sq)
        if fa <= 0 or fb <= 0:
            raise ValueError("sampling distribution undefined: A or B has zero Frobenius norm")
        prefix = np.concatenate([[0.0], np.cumsum(b)])
        return cls(float(m), a, b, fa, fb, prefix)

    @classmethod
    def from_summary(cls, m, s: SketchSummary):
        return cls.from_norms(m, s.a_col_sq, s.b_col_sq, s.a_frob_sq, s.b_frob_sq)

    @property
    def shape(self):
        return self.a_col_sq.size, self.b_col_sq.size

    def row_terms(self):
        """``(alpha, beta)`` with ``q_ij = alpha[i] + beta * ||B_j||^2``."""
        n1, n2 = self.shape
        alpha = self.m * self.a_col_sq / (2.0 * n2 * self.a_frob_sq)
        beta = self.m / (2.0 * n1 * self.b_frob_sq)
        return alpha, beta

    def q(self, rows, cols):
        alpha, beta = self.row_terms()
        return alpha[rows] + beta * self.b_col_sq[cols]

    def q_hat(self, rows, cols):
        return np.minimum(1.0, self.q(rows, cols))


def q_of(dist: SampleDistribution, i: int, j: int) -> float:
    n1, n2 = dist.shape
    if not (0 <= i < n1 and 0 <= j < n2):
        raise IndexError(f"({i}, {j}) out of range for {n1} x {n2}")
    return float(dist.q(np.array([i]), np.array([j]))[0])


def q_matrix(dist: SampleDistribution):
    """Dense ``q_ij`` (oracle use only)."""
    alpha, beta = dist.row_terms()
    return alpha[:, None] + beta * dist.b_col_sq[None, :]


def sample_binomial(dist: SampleDistribution, seed=0):
    """Include every ``(i, j)`` independently with probability ``min(1, q_ij)``; O(n1 n2)."""
    if dist.m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    n1, n2 = dist.shape
    q_hat = np.minimum(1.0, q_matrix(dist))
    hit = _rng(seed).random((n1, n2)) < q_hat
    return np.argwhere(hit).astype(np.int64)


def _search_columns(alpha_rows, beta, prefix, targets, hi):
    """
    Smallest ``j`` with ``alpha*(j+1) + beta*prefix[j+1] > target`` in
    ``[0, hi]`` (vectorised bisection; ``hi`` may be per-target).
    """
    lo = np.zeros(targets.size, dtype=np.int64)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.int64), targets.shape).copy()
    while True:
        active = lo < hi
        if not np.any(active):
            return lo
        mid = (lo + hi) // 2
        cdf = alpha_rows * (mid + 1) + beta * prefix[mid + 1]
        right = cdf <= targets
        lo = np.where(active & right, mid + 1, lo)
        hi = np.where(active & ~right, mid, hi)


def row_draws(dist: SampleDistribution, rows, seed=0):
    """
    One multinomial draw per entry of ``rows``: column ``j`` of row ``i`` is
    picked with probability ``q_ij / sum_j q_ij``.  Bisection on the row CDF,
    which is affine in ``j`` and in the prefix sums of ``||B_j||^2``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    alpha, beta = dist.row_terms()
    n2 = dist.shape[1]
    mu = n2 * alpha[rows] + beta * dist.b_prefix_sums[-1]
    targets = _rng(seed).random(rows.size) * mu
    return _search_columns(alpha[rows], beta, dist.b_prefix_sums, targets, n2 - 1)


# entries with q_ij at or above this are drawn directly (at most m / HIGH_Q of them)
HIGH_Q = 0.5


def sample_fast(dist: SampleDistribution, seed=0, method="thinned"):
    """
    Row-wise sampler in O(n1 + n2 log n2 + m log n2).

    ``method="poisson"`` is the plain scheme: row ``i`` receives a
    Poisson(``sum_j q_ij``) number of multinomial draws (see :func:`row_draws`)
    and repeated draws collapse to one pair, so entry ``(i, j)`` is included
    with probability ``1 - exp(-q_ij)``, slightly below ``min(1, q_ij)``.

    ``method="thinned"`` (default) makes every inclusion probability exactly
    ``min(1, q_ij)``, matching the binomial model and hence the weights
    ``1 / q_hat``.  With columns sorted by ``||B_j||^2``, the entries of row
    ``i`` with ``q_ij >= 1/2`` form a suffix; they are drawn as independent
    Bernoulli trials.  The rest are hit by a Poisson process whose rate
    ``c_i q_ij`` dominates ``-log(1 - q_ij)`` (affine in the sorted prefix sums,
    so still sampled by bisection) and thinned with acceptance
    ``-log(1 - q_ij) / (c_i q_ij)``; an entry is then hit at least once with
    probability ``q_ij``.

    Returns the sampled pairs as an (|Omega|, 2) array sorted by ``(i, j)``.
    """
    if method not in ("thinned", "poisson"):
        raise ValueError(f"method must be 'thinned' or 'poisson', got {method!r}")
    n1, n2 = dist.shape
    if dist.m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    rng = _rng(seed)
    alpha, beta = dist.row_terms()
    if method == "poisson":
        mu = n2 * alpha + beta * dist.b_prefix_sums[-1]
        rows = np.repeat(np.arange(n1, dtype=np.int64), rng.poisson(mu))
        targets = rng.random(rows.size) * mu[rows]
        cols = _search_columns(alpha[rows], beta, dist.b_prefix_sums, targets, n2 - 1)
        return _pairs(rows, cols, n2)

    order = np.argsort(dist.b_col_sq, kind="stable")
    bq = beta * dist.b_col_sq[order]
    prefix = np.concatenate([[0.0], np.cumsum(dist.b_col_sq[order])])
    low = np.searchsorted(bq, HIGH_Q - alpha, side="left")  # per row: sorted columns with q < HIGH_Q

    # low part: dominated Poisson process, then thinning
    has_low = low > 0
    q_top = np.where(has_low, alpha + bq[np.maximum(low - 1, 0)], 0.0)
    q_top = np.minimum(q_top, HIGH_Q)
    c = np.where(q_top > 0, -np.log1p(-q_top) / np.where(q_top > 0, q_top, 1.0), 1.0)
    mass = alpha * low + beta * prefix[low]
    rows = np.repeat(np.arange(n1, dtype=np.int64), rng.poisson(c * mass))
    targets = rng.random(rows.size) * mass[rows]
    pos = _search_columns(alpha[rows], beta, prefix, targets, np.maximum(low[rows] - 1, 0))
    q_hit = np.minimum(alpha[rows] + bq[pos], HIGH_Q)
    keep = rng.random(rows.size) * (c[rows] * q_hit) < -np.log1p(-q_hit)
    low_rows, low_cols = rows[keep], order[pos[keep]]

    # high part: direct Bernoulli over the suffix of each row
    n_high = n2 - low
    hi_rows = np.repeat(np.arange(n1, dtype=np.int64), n_high)
    starts = np.cumsum(n_high) - n_high
    pos = low[hi_rows] + (np.arange(hi_rows.size) - starts[hi_rows])
    q_hi = np.minimum(1.0, alpha[hi_rows] + bq[pos])
    keep = rng.random(hi_rows.size) < q_hi
    return _pairs(np.concatenate([low_rows, hi_rows[keep]]),
                  np.concatenate([low_cols, order[pos[keep]]]), n2)


def _pairs(rows, cols, n2):
    keys = np.unique(rows * n2 + cols)
    return np.stack([keys // n2, keys % n2], axis=1)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """
    Sampled entries ``Omega`` with their estimated values, inclusion
    probabilities ``q_hat`` and weights ``1 / q_hat``, as parallel arrays.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    q_hat: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        object.__setattr__(self, "cols", np.asarray(self.cols, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "q_hat", np.asarray(self.q_hat, dtype=np.float64))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        n = self.rows.size
        if not (self.cols.size == self.values.size == self.q_hat.size == n):
            raise ValueError("sample arrays must have equal length")
        if n:
            if self.rows.min() < 0 or self.rows.max() >= self.shape[0] \
                    or self.cols.min() < 0 or self.cols.max() >= self.shape[1]:
                raise IndexError("sample index out of range")
            if np.any(self.q_hat <= 0) or np.any(self.q_hat > 1):
                raise ValueError("q_hat must lie in (0, 1]")
            keys = self.rows * self.shape[1] + self.cols
            if np.unique(keys).size != n:
                raise ValueError("duplicate (i, j) pairs in sample set")

    @property
    def weights(self):
        return 1.0 / self.q_hat

    def __len__(self):
        return self.rows.size

    def subset(self, index):
        return SampleSet(self.rows[index], self.cols[index], self.values[index],
                         self.q_hat[index], self.shape)

    def with_values(self, values):
        return SampleSet(self.rows, self.cols, values, self.q_hat, self.shape)

    def to_dense(self, weighted=False):
        """``P_Omega`` (or ``w .* P_Omega`` if ``weighted``) as a dense array."""
        M = np.zeros(self.shape)
        M[self.rows, self.cols] = self.values * self.weights if weighted else self.values
        return M


def build_sample_set(pairs, dist: SampleDistribution, summary: SketchSummary,
                     kind=EstimatorKind.RESCALED) -> SampleSet:
    """Attach estimated values, ``q_hat`` and weights to sampled pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if dist.shape != summary.dims[1:]:
        raise ValueError(f"distribution shape {dist.shape} does not match summary dims {summary.dims}")
    rows, cols = pairs[:, 0], pairs[:, 1]
    values = estimate_pairs(summary, rows, cols, kind)
    return SampleSet(rows, cols, values, dist.q_hat(rows, cols), dist.shape)


# -- serialisation ----------------------------------------------------------

def save_samples_csv(samples: SampleSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value", "q_hat"])
        w.writerow(["#shape", samples.shape[0], samples.shape[1], ""])
        for row in zip(samples.rows.tolist(), samples.cols.tolist(),
                       samples.values.tolist(), samples.q_hat.tolist()):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])


def load_samples_csv(path) -> SampleSet:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        _, n1, n2, _ = next(r)
        data = [(int(i), int(j), float(v), float(q)) for i, j, v, q in r]
    arr = np.array(data, dtype=[("i", "i8"), ("j", "i8"), ("v", "f8"), ("q", "f8")])
    return SampleSet(arr["i"], arr["j"], arr["v"], arr["q"], (int(n1), int(n2)))


# Binary layout mirrors the entry-stream file: 24-byte header
# (magic "SMPQ", version u32, count u32, n1 u32, n2 u32, reserved u32) followed
# by packed little-endian records (u32 i, u32 j, f64 value, f64 q_hat).
_SAMPLE_HEADER = struct.Struct("<4sIIIII")
_SAMPLE_DTYPE = np.dtype([("i", "<u4"), ("j", "<u4"), ("value", "<f8"), ("q_hat", "<f8")])


def save_samples_bin(samples: SampleSet, path):
    rec = np.empty(len(samples), dtype=_SAMPLE_DTYPE)
    rec["i"], rec["j"] = samples.rows, samples.cols
    rec["value"], rec["q_hat"] = samples.values, samples.q_hat
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(b"SMPQ", 1, len(samples), *samples.shape, 0))
        fh.write(rec.tobytes())


def load_samples_bin(path) -> SampleSet:
    with open(path, "rb") as fh:
        magic, version, count, n1, n2, _ = _SAMPLE_HEADER.unpack(fh.read(_SAMPLE_HEADER.size))
        if magic != b"SMPQ" or version != 1:
            raise ValueError(f"{path}: not a sample-set file")
        rec = np.fromfile(fh, dtype=_SAMPLE_DTYPE, count=count)
    return SampleSet(rec["i"], rec["j"], rec["value"], rec["q_hat"], (n1, n2))
