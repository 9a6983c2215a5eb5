"""
Why the rescaled estimator helps: when the columns of A and B point in
similar directions, the sketched dot product is dominated by the error in
the sketched norms, which the rescaled estimator replaces by exact ones.

    python3 demos/cone_ratio.py
"""
import numpy as np

from smppca import GeneratorSpec, SketchOperator, estimate_dense, generate, ingest_dense

d, n, k = 1000, 200, 50
op = SketchOperator("gaussian", k, d, seed=0)
print("theta   plain/rescaled spectral error")
for theta in (10, 30, 60, 90, 150):
    A, B = generate(GeneratorSpec("cone", d, n, n, theta_deg=theta, seed=1))
    M = A.T @ B
    s = ingest_dense(A, B, op)
    err = {kind: np.linalg.norm(M - estimate_dense(s, kind), 2) for kind in ("plain", "rescaled")}
    print(f"{theta:5d}   {err['plain'] / err['rescaled']:8.2f}")
