"""
Weighted alternating minimization for completing a low-rank matrix from a
weighted :class:`~smppca.sample.SampleSet`.

The objective is ``sum_{(i,j) in Omega} w_ij (U_i . V_j - value_ij)^2``.  The
sample set is split into ``2T + 1`` parts: the first seeds a weighted SVD,
whose left factor is trimmed, and the rest feed T rounds of alternating
weighted least squares (solve V, then solve U).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .matrix_core import subspace_iteration
from .sample import SampleSet

__all__ = [
    "Partition",
    "Side",
    "WaltminConfig",
    "FactorPair",
    "partition_omega",
    "weighted_init",
    "trim",
    "als_step",
    "objective",
    "run_waltmin",
]

DENSE_INIT_MAX = 512


class Partition(str, enum.Enum):
    FRESH = "fresh"   # 2T+1 disjoint random parts
    REUSE = "reuse"   # every step sees all of Omega


class Side(str, enum.Enum):
    SOLVE_V = "V"
    SOLVE_U = "U"


@dataclass(frozen=True)
class WaltminConfig:
    r: int
    T: int = 10
    partition: Partition = Partition.FRESH
    trim_constant: float = 8.0
    ls_regularization: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition(self.partition))
        if self.r < 1:
            raise ValueError(f"rank r must be >= 1, got {self.r}")
        if self.T < 1:
            raise ValueError(f"iteration count T must be >= 1, got {self.T}")
        if self.trim_constant <= 0:
            raise ValueError("trim_constant must be positive")
        if self.ls_regularization < 0:
            raise ValueError("ls_regularization must be nonnegative")


@dataclass(frozen=True, eq=False)
class FactorPair:
    """Rank-r factors with ``U @ V.T`` approximating the target; ``meta`` holds diagnostics."""

    U: np.ndarray
    V: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ValueError(f"incompatible factor shapes {self.U.shape} and {self.V.shape}")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V))):
            raise FloatingPointError("factor matrices contain NaN or Inf")

    @property
    def rank(self):
        return self.U.shape[1]

    def product(self):
        return self.U @ self.V.T


def partition_omega(samples: SampleSet, T: int, mode=Partition.FRESH, seed=0):
    """Split Omega into ``2T + 1`` parts (disjoint for ``FRESH``; all of Omega for ``REUSE``)."""
    mode = Partition(mode)
    parts = 2 * int(T) + 1
    if mode is Partition.REUSE:
        return [samples] * parts
    if len(samples) < parts:
        raise ValueError(f"need at least 2T+1 = {parts} samples to partition, got {len(samples)}")
    perm = np.random.Generator(np.random.Philox(key=int(seed))).permutation(len(samples))
    return [samples.subset(np.sort(chunk)) for chunk in np.array_split(perm, parts)]


def _weighted_sparse(samples):
    return sp.csr_matrix((samples.values * samples.weights, (samples.rows, samples.cols)),
                         shape=samples.shape)


def weighted_init(samples: SampleSet, r: int, tol=1e-8, max_iters=300, seed=0) -> FactorPair:
    """
    Top-``r`` SVD of ``R = w .* P_Omega(values)``.

    Returns ``U`` with orthonormal columns and ``V`` scaled by the singular
    values.  Dense decomposition when ``min(n1, n2) <= 512``, otherwise block
    power iteration on the sparse matrix.  Fewer than ``r`` nonzero singular
    values leave zero columns and set ``meta["rank_deficient"]``.
    """
    if len(samples) == 0:
        raise ValueError("weighted_init needs at least one sample")
    n1, n2 = samples.shape
    if r > min(n1, n2):
        raise ValueError(f"rank {r} exceeds dimensions {samples.shape}")
    R = _weighted_sparse(samples)
    meta = {}
    if min(n1, n2) <= DENSE_INIT_MAX:
        U, S, Vt = np.linalg.svd(R.toarray(), full_matrices=False)
        U, S, V = U[:, :r], S[:r], Vt[:r].T
    else:
        U, S, V, iters, ok = subspace_iteration(lambda X: R @ X, lambda Y: R.T @ Y, R.shape, r,
                                                oversample=max(5, r), tol=tol, max_iters=max_iters,
                                                seed=seed)
        meta.update(init_iterations=iters, init_converged=bool(ok))
    keep = S > (S[0] if S.size else 0.0) * 1e-13 * max(n1, n2)
    if not np.all(keep):
        U = np.where(keep[None, :], U, 0.0)
        V = np.where(keep[None, :], V, 0.0)
        S = np.where(keep, S, 0.0)
        meta["rank_deficient"] = True
    meta["init_singular_values"] = S.tolist()
    return FactorPair(U, V * S[None, :], meta)


def _orthonormalize(U):
    """Orthonormal basis of the column span of U, padded with zero columns if rank-deficient."""
    if not np.any(U):
        return np.zeros_like(U)
    Q, Rm = np.linalg.qr(U)
    diag = np.abs(np.diag(Rm))
    good = diag > diag.max() * 1e-12
    if np.all(good):
        # fix column signs so repeated orthonormalisation is stable
        return Q * np.sign(np.where(np.diag(Rm) == 0, 1.0, np.diag(Rm)))[None, :]
    P, s, _ = np.linalg.svd(U, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12))
    out = np.zeros_like(U)
    out[:, :rank] = P[:, :rank]
    return out


def trim(U, a_col_norms, a_frob, r, c=8.0):
    """
    Zero every row of the orthonormalised ``U`` whose norm exceeds
    ``c * sqrt(r) * ||A_i|| / ||A||_F`` and re-orthonormalise; repeat until no
    row is above its threshold.  The result is a fixed point, so trimming
    twice changes nothing.
    """
    U = np.asarray(U, dtype=np.float64)
    a_col_norms = np.asarray(a_col_norms, dtype=np.float64)
    if U.shape[0] != a_col_norms.size:
        raise ValueError(f"U has {U.shape[0]} rows but {a_col_norms.size} column norms were given")
    limit = c * np.sqrt(r) * a_col_norms / a_frob if a_frob > 0 else np.zeros_like(a_col_norms)
    U = _orthonormalize(U)
    zeroed = np.zeros(U.shape[0], dtype=bool)
    while True:
        over = (np.linalg.norm(U, axis=1) > limit) & ~zeroed
        if not np.any(over):
            return U
        zeroed |= over
        U[zeroed] = 0.0
        U = _orthonormalize(U)
        U[zeroed] = 0.0


def als_step(samples: SampleSet, fixed, side=Side.SOLVE_V, reg=1e-10):
    """
    Solve for the free factor with the other one held fixed.

    For ``SOLVE_V`` row ``j`` of V minimises
    ``sum_{i:(i,j) in Omega} w_ij (fixed_i . v - value_ij)^2`` through the r x r
    normal equations plus a ridge ``reg * trace / r``.  Rows without samples
    come back as zero.
    """
    side = Side(side)
    fixed = np.asarray(fixed, dtype=np.float64)
    if side is Side.SOLVE_V:
        known, free, n_free = samples.rows, samples.cols, samples.shape[1]
    else:
        known, free, n_free = samples.cols, samples.rows, samples.shape[0]
    r = fixed.shape[1]
    F = fixed[known]
    w = samples.weights
    order = np.argsort(free, kind="stable")
    free_s, F_s = free[order], F[order]
    wF = (w[order])[:, None] * F_s
    outer = wF[:, :, None] * F_s[:, None, :]
    rhs_terms = wF * samples.values[order][:, None]
    starts = np.flatnonzero(np.r_[True, free_s[1:] != free_s[:-1]]) if free_s.size else np.zeros(0, int)
    G = np.zeros((n_free, r, r))
    b = np.zeros((n_free, r))
    if free_s.size:
        G[free_s[starts]] = np.add.reduceat(outer, starts, axis=0)
        b[free_s[starts]] = np.add.reduceat(rhs_terms, starts, axis=0)
    tr = np.trace(G, axis1=1, axis2=2)
    active = tr > 0
    out = np.zeros((n_free, r))
    if np.any(active):
        Ga = G[active] + (reg * tr[active] / r)[:, None, None] * np.eye(r)[None]
        try:
            out[active] = np.linalg.solve(Ga, b[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            out[active] = np.einsum("nij,nj->ni", np.linalg.pinv(Ga), b[active])
    return out


def objective(samples: SampleSet, U, V):
    """Weighted squared residual on ``samples``."""
    pred = np.sum(U[samples.rows] * V[samples.cols], axis=1)
    return float(np.sum(samples.weights * (pred - samples.values) ** 2))


def run_waltmin(samples: SampleSet, cfg: WaltminConfig, a_col_norms, a_frob, seed=0,
                track_objective=False) -> FactorPair:
    """
    Partition, initialise from the weighted SVD of the first part, trim, then
    run ``cfg.T`` rounds of (solve V on part 2t+1, solve U on part 2t+2).
    """
    parts = partition_omega(samples, cfg.T, cfg.partition, seed=seed)
    init = weighted_init(parts[0], cfg.r, seed=seed)
    U = trim(init.U, a_col_norms, a_frob, cfg.r, cfg.trim_constant)
    meta = {k: v for k, v in init.meta.items() if k != "init_singular_values"}
    meta.update(r=cfg.r, T=cfg.T, partition=cfg.partition.value, seed=int(seed),
                trimmed_rows=int(np.sum(~np.any(U, axis=1) & np.any(init.U, axis=1))))
    history = []
    V = np.zeros((samples.shape[1], cfg.r))
    for t in range(cfg.T):
        V = als_step(parts[2 * t + 1], U, Side.SOLVE_V, cfg.ls_regularization)
        U = als_step(parts[2 * t + 2], V, Side.SOLVE_U, cfg.ls_regularization)
        if track_objective:
            history.append(objective(samples, U, V))
    if track_objective:
        meta["objective"] = history
    return FactorPair(U, V, meta)
