"""Synthetic instances for the experiments."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = ["GeneratorKind", "GeneratorSpec", "generate"]

# OrthoTop: B = Q2 X_B + ORTHO_MIX * Q1 Y_B + tail, A = Q1 X_A + tail
ORTHO_MIX = 0.8
ORTHO_TAIL = 0.01


class GeneratorKind(str, enum.Enum):
    GD = "gd"
    CONE = "cone"
    ORTHO_TOP = "orthotop"
    EXACT_RANK = "exactrank"


@dataclass(frozen=True)
class GeneratorSpec:
    kind: GeneratorKind
    d: int
    n1: int
    n2: int
    r: int = 5
    theta_deg: float | None = None
    seed: int = 0
    shared_gaussian: bool = True  # GD only: A and B use the same G

    def __post_init__(self):
        object.__setattr__(self, "kind", GeneratorKind(self.kind))
        if min(self.d, self.n1, self.n2) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.kind is GeneratorKind.CONE:
            if self.theta_deg is None or not 0 < self.theta_deg < 180:
                raise ValueError("cone angle theta_deg must lie in (0, 180)")
        if self.kind in (GeneratorKind.ORTHO_TOP, GeneratorKind.EXACT_RANK):
            if self.r < 1 or self.r > min(self.n1, self.n2):
                raise ValueError(f"rank r={self.r} out of range")
        if self.kind is GeneratorKind.ORTHO_TOP and 2 * self.r > self.d:
            raise ValueError("OrthoTop needs d >= 2r")


def generate(spec: GeneratorSpec):
    """Return ``(A, B)`` (both with ``spec.d`` rows) for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    d, n1, n2, r = spec.d, spec.n1, spec.n2, spec.r
    if spec.kind is GeneratorKind.GD:
        if spec.shared_gaussian:
            G = rng.standard_normal((d, max(n1, n2)))
            GA, GB = G[:, :n1], G[:, :n2]
        else:
            GA, GB = rng.standard_normal((d, n1)), rng.standard_normal((d, n2))
        return GA / np.arange(1, n1 + 1), GB / np.arange(1, n2 + 1)
    if spec.kind is GeneratorKind.CONE:
        x = rng.standard_normal(d)
        x /= np.linalg.norm(x)
        return _cone(rng, x, n1, spec.theta_deg), _cone(rng, x, n2, spec.theta_deg)
    if spec.kind is GeneratorKind.EXACT_RANK:
        G = rng.standard_normal((d, r))
        return G @ rng.standard_normal((r, n1)), G @ rng.standard_normal((r, n2))
    Q, _ = np.linalg.qr(rng.standard_normal((d, 2 * r)))
    Q1, Q2 = Q[:, :r], Q[:, r:]
    A = Q1 @ rng.standard_normal((r, n1)) + ORTHO_TAIL * rng.standard_normal((d, n1))
    B = (Q2 @ rng.standard_normal((r, n2)) + ORTHO_MIX * (Q1 @ rng.standard_normal((r, n2)))
         + ORTHO_TAIL * rng.standard_normal((d, n2)))
    return A, B


def _cone(rng, x, n, theta_deg):
    d = x.size
    # E||t|| = sigma * sqrt(2) * Gamma((d+1)/2) / Gamma(d/2) for t ~ N(0, sigma^2 I_d)
    mean_chi = math.sqrt(2.0) * math.exp(gammaln((d + 1) / 2) - gammaln(d / 2))
    sigma = math.tan(math.radians(theta_deg) / 2) / mean_chi
    Y = x[:, None] + sigma * rng.standard_normal((d, n))
    Y *= rng.choice([-1.0, 1.0], size=n)[None, :]
    return Y / np.linalg.norm(Y, axis=0)[None, :]
