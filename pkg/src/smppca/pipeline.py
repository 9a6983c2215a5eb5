"""
End-to-end one-pass approximation of A^T B, the baselines it is measured
against, a parameter advisor and the evaluation report.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimate import EstimatorKind
from .matrix_core import (EntryStream, as_dense, exact_product, spectral_norm, subspace_iteration,
                          truncated_svd)
from .sample import SampleDistribution, SampleSet, build_sample_set, sample_binomial, sample_fast
from .sketch import SketchKind, SketchOperator, SketchSummary, exact_col_sq, ingest, ingest_dense
from .waltmin import FactorPair, Partition, WaltminConfig, run_waltmin

__all__ = [
    "Sampler",
    "PipelineConfig",
    "EvalReport",
    "NormContext",
    "ParameterAdvice",
    "smp_pca",
    "smp_pca_dense",
    "smp_pca_from_summary",
    "draw_samples",
    "lela_two_pass",
    "sketch_svd_baseline",
    "advise_parameters",
    "norm_context",
    "evaluate",
    "default_sample_budget",
    "derive_seeds",
    "save_factors",
    "load_factors",
]

EVAL_MAX_ENTRIES = 10 ** 8


class Sampler(str, enum.Enum):
    FAST = "fast"
    BINOMIAL = "binomial"


def default_sample_budget(n, r, factor=4.0):
    """The experiments' rule of thumb ``m = factor * n * r * log(n)``."""
    return int(math.ceil(factor * n * r * math.log(n)))


def derive_seeds(seed):
    """Sub-seeds ``(sketch, sampler, waltmin)`` of a run seed."""
    s = np.random.SeedSequence(int(seed)).generate_state(3, dtype=np.uint64)
    return int(s[0]), int(s[1]), int(s[2])


@dataclass(frozen=True)
class PipelineConfig:
    """Parameters of one run.  ``waltmin`` is derived from ``r``/``T``/``partition`` when omitted."""

    r: int
    k: int
    m: int
    T: int = 10
    sketch_kind: SketchKind = SketchKind.GAUSSIAN
    estimator_kind: EstimatorKind = EstimatorKind.RESCALED
    sampler: Sampler = Sampler.FAST
    seed: int = 0
    partition: Partition = Partition.FRESH
    fast_method: str = "thinned"
    waltmin: WaltminConfig | None = None

    def __post_init__(self):
        for name, cls in (("sketch_kind", SketchKind), ("estimator_kind", EstimatorKind),
                          ("sampler", Sampler), ("partition", Partition)):
            object.__setattr__(self, name, cls(getattr(self, name)))
        for name in ("r", "k", "m", "T"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.waltmin is None:
            object.__setattr__(self, "waltmin", WaltminConfig(self.r, self.T, self.partition))
        elif (self.waltmin.r, self.waltmin.T) != (self.r, self.T):
            raise ValueError("waltmin config disagrees with r/T")
        if self.waltmin.partition is Partition.FRESH and self.m < 2 * self.T + 1:
            raise ValueError(f"m must be >= 2T+1 = {2 * self.T + 1} with fresh partitioning")

    def seeds(self):
        """Independent sub-seeds for (sketch, sampler, waltmin)."""
        return derive_seeds(self.seed)

    def operator(self, d):
        return SketchOperator(self.sketch_kind, self.k, d, self.seeds()[0])

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "waltmin"}
        out = {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in out.items()}
        out["trim_constant"] = self.waltmin.trim_constant
        out["ls_regularization"] = self.waltmin.ls_regularization
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        trim_c = d.pop("trim_constant", 8.0)
        reg = d.pop("ls_regularization", 1e-10)
        wm = WaltminConfig(d["r"], d.get("T", 10), d.get("partition", "fresh"), trim_c, reg)
        return cls(waltmin=wm, **d)


def draw_samples(dist: SampleDistribution, cfg: PipelineConfig):
    seed = cfg.seeds()[1]
    if cfg.sampler is Sampler.BINOMIAL:
        return sample_binomial(dist, seed)
    return sample_fast(dist, seed, cfg.fast_method)


def smp_pca_from_summary(summary: SketchSummary, cfg: PipelineConfig, timings=None) -> FactorPair:
    """Sample, estimate and complete, given the output of the single pass."""
    timings = dict(timings or {})
    t0 = time.perf_counter()
    dist = SampleDistribution.from_summary(cfg.m, summary)
    pairs = draw_samples(dist, cfg)
    samples = build_sample_set(pairs, dist, summary, cfg.estimator_kind)
    t1 = time.perf_counter()
    factors = run_waltmin(samples, cfg.waltmin, summary.a_col_norms, math.sqrt(summary.a_frob_sq),
                          seed=cfg.seeds()[2])
    t2 = time.perf_counter()
    timings.update(sample_estimate=t1 - t0, waltmin=t2 - t1)
    meta = dict(factors.meta, num_samples=len(samples), timings=timings, config=cfg.to_dict())
    return FactorPair(factors.U, factors.V, meta)


def smp_pca(stream: EntryStream, cfg: PipelineConfig) -> FactorPair:
    """
    One pass over ``stream``: sketch plus exact column norms, then biased
    sampling of entries estimated with the rescaled estimator, then weighted
    alternating minimization.  Deterministic given ``cfg.seed``.
    """
    t0 = time.perf_counter()
    summary = ingest(stream, cfg.operator(stream.dims[0]))
    return smp_pca_from_summary(summary, cfg, {"sketch": time.perf_counter() - t0})


def smp_pca_dense(A, B, cfg: PipelineConfig) -> FactorPair:
    """:func:`smp_pca` on in-memory matrices via the buffered sketch path (bitwise identical)."""
    A = as_dense(A, "A")
    t0 = time.perf_counter()
    summary = ingest_dense(A, B, cfg.operator(A.shape[0]))
    return smp_pca_from_summary(summary, cfg, {"sketch": time.perf_counter() - t0})


def lela_two_pass(A, B, cfg: PipelineConfig) -> FactorPair:
    """
    Two-pass baseline: column norms in the first pass, exact ``A_i . B_j``
    on the sampled pairs in the second.  Shares the sampler, partitioning and
    completion code (and seeds) with :func:`smp_pca`, so the same config
    draws the same Omega.
    """
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ValueError("A and B must have the same number of rows")
    t0 = time.perf_counter()
    width = cfg.operator(A.shape[0]).bin_bits
    a_sq, b_sq = exact_col_sq(A, width), exact_col_sq(B, width)
    dist = SampleDistribution.from_norms(cfg.m, a_sq, b_sq)
    pairs = draw_samples(dist, cfg)
    rows, cols = pairs[:, 0], pairs[:, 1]
    values = np.empty(rows.size)
    step = 1 << 14
    for lo in range(0, rows.size, step):
        sl = slice(lo, lo + step)
        values[sl] = np.einsum("ij,ij->j", A[:, rows[sl]], B[:, cols[sl]])
    samples = SampleSet(rows, cols, values, dist.q_hat(rows, cols), dist.shape)
    t1 = time.perf_counter()
    factors = run_waltmin(samples, cfg.waltmin, np.sqrt(a_sq), math.sqrt(float(np.sum(a_sq))),
                          seed=cfg.seeds()[2])
    t2 = time.perf_counter()
    meta = dict(factors.meta, num_samples=len(samples), config=cfg.to_dict(),
                timings={"two_pass_sample": t1 - t0, "waltmin": t2 - t1})
    return FactorPair(factors.U, factors.V, meta)


def sketch_svd_baseline(s: SketchSummary, r: int, tol=1e-10, max_iters=2000, seed=0) -> FactorPair:
    """
    Top-``r`` factors of ``A_sketch.T @ B_sketch`` by block power iteration on
    the implicit product (never formed).  ``U`` is orthonormal and ``V`` carries
    the singular values.
    """
    if r < 1:
        raise ValueError(f"rank r must be >= 1, got {r}")
    _, n1, n2 = s.dims
    if r > min(n1, n2):
        raise ValueError(f"rank {r} exceeds product dimensions {n1} x {n2}")
    As, Bs = s.A_sketch, s.B_sketch
    t0 = time.perf_counter()
    U, S, V, iters, ok = subspace_iteration(lambda X: As.T @ (Bs @ X), lambda Y: Bs.T @ (As @ Y),
                                            (n1, n2), r, oversample=r, tol=tol, max_iters=max_iters,
                                            seed=seed)
    meta = {"iterations": iters, "converged": bool(ok), "timings": {"svd": time.perf_counter() - t0}}
    keep = S > (S[0] if S.size else 0.0) * 1e-13 * max(n1, n2)
    if not np.all(keep):
        U, V, S = U * keep, V * keep, S * keep
        meta["rank_deficient"] = True
    return FactorPair(U, V * S[None, :], meta)


@dataclass(frozen=True)
class NormContext:
    """Norm quantities of A, B and A^T B that the advisor needs."""

    a_spectral: float
    b_spectral: float
    a_frob: float
    b_frob: float
    product_frob: float
    rho: float

    @property
    def stable_rank(self):
        return max(self.a_frob ** 2 / self.a_spectral ** 2, self.b_frob ** 2 / self.b_spectral ** 2)


def norm_context(A, B, r) -> NormContext:
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    M = exact_product(A, B)
    sig = np.linalg.svd(M, compute_uv=False)
    return NormContext(spectral_norm(A), spectral_norm(B), float(np.linalg.norm(A)),
                       float(np.linalg.norm(B)), float(np.linalg.norm(M)),
                       float(sig[0] / sig[r - 1]) if sig[r - 1] > 0 else math.inf)


@dataclass(frozen=True)
class ParameterAdvice:
    """Recommended ``(k, m, T)``; the ``*_raw`` fields are the unrounded bounds."""

    k: int
    m: int
    T: int
    k_raw: float
    m_raw: float
    T_raw: float

    def __iter__(self):
        return iter((self.k, self.m, self.T))


def advise_parameters(target_eta, gamma, zeta, norms, n, r, c1=1.0, c2=1.0) -> ParameterAdvice:
    """
    Sketch size, sample count and iteration count from the sufficient
    conditions of the error guarantee, with the unspecified global
    constants set to ``c1 = c2 = 1``.  Relative guidance only.

    ``norms`` is a :class:`NormContext` or an :class:`EvalReport` (anything with
    ``a_spectral``, ``b_spectral``, ``a_frob``, ``b_frob``, ``product_frob``
    and ``rho``).
    """
    if not (0 < target_eta < 1 and 0 < gamma < 1):
        raise ValueError("need 0 < eta < 1 and 0 < gamma < 1")
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    try:
        a2, b2 = norms.a_spectral, norms.b_spectral
        af, bf, pf, rho = norms.a_frob, norms.b_frob, norms.product_frob, norms.rho
    except AttributeError as exc:
        raise ValueError(f"norm context is missing a required quantity: {exc}") from None
    if None in (a2, b2, af, bf, pf, rho):
        raise ValueError("norm context is missing a required quantity")
    stable = max(af ** 2 / a2 ** 2, bf ** 2 / b2 ** 2)
    logn = math.log(n)
    k_raw = (c1 * a2 ** 2 * b2 ** 2 * rho ** 2 * r ** 3 / pf ** 2
             * (max(stable, 2 * logn) + math.log(3 / gamma)) / target_eta ** 2)
    T_raw = math.log((af + bf) / zeta)
    T = max(1, math.ceil(T_raw))
    m_raw = (c2 * stable ** 2 / gamma * ((af ** 2 + bf ** 2) / pf) ** 2
             * n * r ** 3 * rho ** 2 * logn * T ** 2 / target_eta ** 2)
    return ParameterAdvice(math.ceil(k_raw), math.ceil(m_raw), T, k_raw, m_raw, T_raw)


@dataclass
class EvalReport:
    spectral_err_rel: float
    frob_err_rel: float
    optimal_spectral_err_rel: float
    stable_rank_a: float
    stable_rank_b: float
    condition_number_rho: float
    sigma: list
    a_spectral: float
    b_spectral: float
    a_frob: float
    b_frob: float
    product_frob: float
    r: int
    wall_times: dict = field(default_factory=dict)

    @property
    def rho(self):
        return self.condition_number_rho

    def to_json(self, path=None):
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        return cls(**json.loads(text))


def evaluate(A, B, factors: FactorPair, r, allow_large=False) -> EvalReport:
    """
    Error report of ``factors`` against the exact product (materialised, so
    desk scale only; refuses more than 1e8 product entries unless
    ``allow_large``).
    """
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ValueError("A and B must have the same number of rows")
    n1, n2 = A.shape[1], B.shape[1]
    if factors.U.shape[0] != n1 or factors.V.shape[0] != n2:
        raise ValueError(f"factor shapes {factors.U.shape}, {factors.V.shape} do not match {n1} x {n2}")
    if n1 * n2 > EVAL_MAX_ENTRIES and not allow_large:
        raise ValueError(f"refusing to materialise a {n1} x {n2} product; pass allow_large=True")
    M = exact_product(A, B)
    m_norm = spectral_norm(M)
    m_frob = float(np.linalg.norm(M))
    Uo, So, Vo = truncated_svd(M, r)
    sig = np.linalg.svd(M, compute_uv=False)
    resid = M - factors.product()
    a2, b2 = spectral_norm(A), spectral_norm(B)
    af, bf = float(np.linalg.norm(A)), float(np.linalg.norm(B))
    safe = m_norm if m_norm > 0 else 1.0
    return EvalReport(
        spectral_err_rel=spectral_norm(resid) / safe,
        frob_err_rel=float(np.linalg.norm(resid)) / (m_frob if m_frob > 0 else 1.0),
        optimal_spectral_err_rel=spectral_norm(M - (Uo * So) @ Vo.T) / safe,
        stable_rank_a=af ** 2 / a2 ** 2 if a2 > 0 else 0.0,
        stable_rank_b=bf ** 2 / b2 ** 2 if b2 > 0 else 0.0,
        condition_number_rho=float(sig[0] / sig[r - 1]) if sig[r - 1] > 0 else math.inf,
        sigma=sig[: max(r + 1, min(10, sig.size))].tolist(),
        a_spectral=a2, b_spectral=b2, a_frob=af, b_frob=bf, product_frob=m_frob, r=int(r),
        wall_times=dict(factors.meta.get("timings", {})),
    )


def save_factors(factors: FactorPair, prefix, fmt="csv"):
    """Write ``<prefix>_U``/``<prefix>_V`` (``.csv`` or ``.npy``) and ``<prefix>.json`` metadata."""
    prefix = Path(prefix)
    for name, mat in (("U", factors.U), ("V", factors.V)):
        path = prefix.with_name(f"{prefix.name}_{name}.{fmt}")
        if fmt == "csv":
            np.savetxt(path, mat, delimiter=",", fmt="%.17g")
        elif fmt == "npy":
            np.save(path, mat)
        else:
            raise ValueError(f"unknown factor format {fmt!r}")
    meta = dict(factors.meta, format=fmt, shape_U=list(factors.U.shape), shape_V=list(factors.V.shape))
    prefix.with_name(prefix.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True,
                                                                  default=_json_default))


def load_factors(prefix) -> FactorPair:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(prefix.name + ".json").read_text())
    fmt = meta.get("format", "csv")
    mats = []
    for name in ("U", "V"):
        path = prefix.with_name(f"{prefix.name}_{name}.{fmt}")
        mat = np.load(path) if fmt == "npy" else np.loadtxt(path, delimiter=",", ndmin=2)
        mats.append(mat.reshape(meta[f"shape_{name}"]))
    return FactorPair(mats[0], mats[1], meta)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
