"""
One-pass low-rank approximation of A^T B on a synthetic instance, next to
the two-pass baseline and the exact truncated SVD.

    python3 demos/quickstart.py
"""
import math

import numpy as np

from smppca import GeneratorSpec, PipelineConfig, evaluate, generate, lela_two_pass, smp_pca
from smppca.matrix_core import EntryStream

n, r = 1000, 5
A, B = generate(GeneratorSpec("gd", n, n, n, r=r, seed=0))

# entries arrive in arbitrary order and are read once
stream = EntryStream.from_dense(A, B, order="shuffled", seed=1)
cfg = PipelineConfig(r=r, k=400, m=int(4 * n * r * math.log(n)), partition="reuse", seed=0)
factors = smp_pca(stream, cfg)
print("samples used:", factors.meta["num_samples"])
print("stage timings:", {k: round(v, 3) for k, v in factors.meta["timings"].items()})

report = evaluate(A, B, factors, r)
print(f"one pass  : spectral error {report.spectral_err_rel:.4f}")
print(f"two passes: spectral error {evaluate(A, B, lela_two_pass(A, B, cfg), r).spectral_err_rel:.4f}")
print(f"optimal   : spectral error {report.optimal_spectral_err_rel:.4f}")
print(f"stable rank of A {report.stable_rank_a:.1f}, condition number of (A^T B)_r {report.rho:.1f}")
assert np.isfinite(report.spectral_err_rel)
