"""Log-stabilized entropic Sinkhorn matching between per-node latent sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .gaussian import DiagGaussian


class TransportError(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    entropic_eps: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.entropic_eps <= 0:
            raise TransportError("entropic_eps must be > 0")
        if self.max_iters < 1:
            raise TransportError("max_iters must be >= 1")
        if self.tol <= 0:
            raise TransportError("tol must be > 0")


@dataclass(frozen=True)
class TransportPlan:
    """Soft node assignment Pi with clamped row/column masses and overlap rho."""

    plan: np.ndarray
    row_mass: np.ndarray  # r_i clamped to [0, 1]
    col_mass: np.ndarray  # c_j clamped to [0, 1]
    rho: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape


def sinkhorn_log(cost: np.ndarray, config: SinkhornConfig | None = None) -> TransportPlan:
    """Alternating log-sum-exp Sinkhorn iteration toward unit marginals.

    Ends on a row-scaling update so row sums are exact; converges when the
    row potential moves less than `tol` (sup norm), and bails out on a
    numerical blow-up (step > 1e4).
    """
    config = config or SinkhornConfig()
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.size == 0:
        raise TransportError(f"cost must be a non-empty 2-D matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise TransportError("non-finite cost entries")
    K = -C / config.entropic_eps
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    blown_up = False
    for _ in range(config.max_iters):
        f_prev, g_prev = f, g
        f = -logsumexp(K + g[None, :], axis=1)
        g = -logsumexp(K + f[:, None], axis=0)
        delta = float(np.max(np.abs(f - f_prev)))
        if delta > 1e4:
            # blow-up guard: keep the pre-step potentials; for far-apart node
            # sets this leaves the near-zero kernel plan (no forced matching)
            f, g = f_prev, g_prev
            blown_up = True
            break
        if delta < config.tol:
            break
    if not blown_up:
        f = -logsumexp(K + g[None, :], axis=1)  # final row update: exact row sums
    plan = np.exp(K + f[:, None] + g[None, :])
    row = np.clip(plan.sum(axis=1), 0.0, 1.0)
    col = np.clip(plan.sum(axis=0), 0.0, 1.0)
    return TransportPlan(plan=plan, row_mass=row, col_mass=col, rho=float(row.sum()))


def node_cost(a: Sequence[DiagGaussian], b: Sequence[DiagGaussian]) -> np.ndarray:
    """Pairwise squared 2-Wasserstein distance between diagonal Gaussians:
    ||mu_i - mu_j||^2 + ||sigma_i - sigma_j||^2."""
    if not a or not b:
        raise TransportError("empty Gaussian set")
    dims = {g.dim for g in a} | {g.dim for g in b}
    if len(dims) != 1:
        raise TransportError(f"latent dimension mismatch: {sorted(dims)}")
    mu_a = np.stack([g.mu for g in a])
    mu_b = np.stack([g.mu for g in b])
    sd_a = np.stack([g.sigma for g in a])
    sd_b = np.stack([g.sigma for g in b])
    dmu = mu_a[:, None, :] - mu_b[None, :, :]
    dsd = sd_a[:, None, :] - sd_b[None, :, :]
    return (dmu**2).sum(axis=2) + (dsd**2).sum(axis=2)


def overlap_mass(plan: TransportPlan) -> float:
    """rho = sum_i min(r_i, 1), the soft count of overlapping nodes."""
    return float(np.minimum(plan.plan.sum(axis=1), 1.0).sum())
