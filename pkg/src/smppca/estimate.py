"""Entry estimators for A^T B computed from a :class:`~smppca.sketch.SketchSummary`."""
from __future__ import annotations

import enum

import numpy as np

from .sketch import SketchSummary

__all__ = ["EstimatorKind", "estimate_entry", "estimate_block", "estimate_pairs", "estimate_dense"]


class EstimatorKind(str, enum.Enum):
    PLAIN = "plain"
    RESCALED = "rescaled"


def _check_pairs(s, rows, cols):
    _, n1, n2 = s.dims
    if rows.size and (rows.min() < 0 or rows.max() >= n1 or cols.min() < 0 or cols.max() >= n2):
        raise IndexError(f"index pair out of range for a {n1} x {n2} product")


def estimate_block(s: SketchSummary, pairs, kind=EstimatorKind.RESCALED):
    """
    Estimate ``(A^T B)[i, j]`` for every ``(i, j)`` in ``pairs``.

    The plain estimator is the sketched dot product ``A_sketch_i . B_sketch_j``.
    The rescaled estimator keeps only the sketched angle and puts back the
    exact column norms::

        ||A_i|| ||B_j|| (A_sketch_i . B_sketch_j) / (||A_sketch_i|| ||B_sketch_j||)

    and returns 0 where either sketched column is zero.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return estimate_pairs(s, pairs[:, 0], pairs[:, 1], kind)


def estimate_pairs(s: SketchSummary, rows, cols, kind=EstimatorKind.RESCALED):
    """Same as :func:`estimate_block` with the pairs given as two index arrays."""
    kind = EstimatorKind(kind)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if rows.shape != cols.shape:
        raise ValueError("rows and cols must have the same length")
    _check_pairs(s, rows, cols)
    # rows of the transposed sketches are contiguous, so each dot product is
    # reduced identically whatever the batch size.
    dots = np.sum(s.A_sketch.T[rows] * s.B_sketch.T[cols], axis=1)
    if kind is EstimatorKind.PLAIN:
        return dots
    sa, sb = s.sketch_col_norms
    denom = sa[rows] * sb[cols]
    out = np.zeros_like(dots)
    ok = denom > 0
    out[ok] = s.a_col_norms[rows[ok]] * s.b_col_norms[cols[ok]] * (dots[ok] / denom[ok])
    return out


def estimate_entry(s: SketchSummary, i: int, j: int, kind=EstimatorKind.RESCALED) -> float:
    """Single-entry form of :func:`estimate_block`."""
    return float(estimate_pairs(s, [i], [j], kind)[0])


def estimate_dense(s: SketchSummary, kind=EstimatorKind.RESCALED):
    """Full n1 x n2 estimate; only for desk-scale analysis (the pipeline never needs it)."""
    kind = EstimatorKind(kind)
    P = s.A_sketch.T @ s.B_sketch
    if kind is EstimatorKind.PLAIN:
        return P
    sa, sb = s.sketch_col_norms
    ra = np.divide(s.a_col_norms, sa, out=np.zeros_like(sa), where=sa > 0)
    rb = np.divide(s.b_col_norms, sb, out=np.zeros_like(sb), where=sb > 0)
    return ra[:, None] * P * rb[None, :]
