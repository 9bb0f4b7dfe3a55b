"""Diagonal-Gaussian latent algebra: KL, sampling, and the symbolic operators.

Closed forms: Mix is a moment-matched single Gaussian (exact mean, interpolated
standard deviations, stabilized by MIX_EPS_STAB), Intersection is a
product-of-experts precision sum, Negation is a signed precision difference
that must stay positive in every coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIX_EPS_STAB = 1e-8


class GaussianError(ValueError):
    pass


class NegationInfeasibleError(GaussianError):
    """Raised when the negation precision is non-positive in some coordinate."""

    def __init__(self, coords):
        self.coords = list(int(c) for c in coords)
        super().__init__(
            f"negation infeasible: non-positive precision in coordinates {self.coords}"
        )


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise GaussianError(f"mu/sigma shape mismatch: {mu.shape} vs {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise GaussianError("non-finite Gaussian parameters")
        if np.any(sigma <= 0):
            raise GaussianError("sigma must be strictly positive")
        mu = mu.copy()
        sigma = sigma.copy()
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def standard_normal(dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(dim), np.ones(dim))


def _check_dims(a: DiagGaussian, b: DiagGaussian):
    if a.dim != b.dim:
        raise GaussianError(f"dimension mismatch: {a.dim} vs {b.dim}")


def kl_diag(a: DiagGaussian, b: DiagGaussian) -> float:
    """KL(a || b) for diagonal Gaussians, summed over coordinates."""
    _check_dims(a, b)
    term = (
        np.log(b.sigma / a.sigma)
        + (a.sigma**2 + (a.mu - b.mu) ** 2) / (2 * b.sigma**2)
        - 0.5
    )
    return float(term.sum())


def mix(a: DiagGaussian, b: DiagGaussian, lambda_mix: float) -> DiagGaussian:
    """Moment-matched interpolation: exact mixture mean, interpolated stds."""
    _check_dims(a, b)
    if not 0.0 <= lambda_mix <= 1.0:
        raise GaussianError(f"lambda_mix must be in [0, 1], got {lambda_mix}")
    mu = (1 - lambda_mix) * a.mu + lambda_mix * b.mu
    sigma = np.sqrt(((1 - lambda_mix) * a.sigma + lambda_mix * b.sigma) ** 2 + MIX_EPS_STAB)
    return DiagGaussian(mu, sigma)


def intersect(a: DiagGaussian, b: DiagGaussian) -> DiagGaussian:
    """Product of experts: precisions add, means are precision-weighted."""
    _check_dims(a, b)
    prec = 1.0 / a.sigma**2 + 1.0 / b.sigma**2
    var = 1.0 / prec
    mu = var * (a.mu / a.sigma**2 + b.mu / b.sigma**2)
    return DiagGaussian(mu, np.sqrt(var))


def negate(
    a: DiagGaussian,
    b: DiagGaussian,
    alpha: float = 1.0,
    beta: float = 0.5,
    clamp_precision: bool = False,
    min_precision: float = 1e-6,
) -> DiagGaussian:
    """Suppress b's high-density region from a: precision alpha/sig_a^2 - beta/sig_b^2.

    Infeasible coordinates (precision <= 0) raise NegationInfeasibleError unless
    clamp_precision is set, which floors them at min_precision (exploratory use).
    """
    _check_dims(a, b)
    if alpha <= 0 or beta <= 0:
        raise GaussianError("alpha and beta must be > 0")
    prec = alpha / a.sigma**2 - beta / b.sigma**2
    bad = np.flatnonzero(prec <= 0)
    if bad.size:
        if not clamp_precision:
            raise NegationInfeasibleError(bad)
        prec = np.maximum(prec, min_precision)
    var = 1.0 / prec
    mu = var * (alpha * a.mu / a.sigma**2 - beta * b.mu / b.sigma**2)
    return DiagGaussian(mu, np.sqrt(var))


def sample(g: DiagGaussian, seed: int) -> np.ndarray:
    """Reparameterized draw mu + sigma * eta from a seeded generator."""
    rng = np.random.default_rng(int(seed) & (2**63 - 1))
    return g.mu + g.sigma * rng.standard_normal(g.dim)


@dataclass(frozen=True)
class LatentState:
    """Four disentangled latent channels: graph-level z_l / z_s, per-node z_p / z_e."""

    z_l: DiagGaussian
    z_s: DiagGaussian
    z_p: tuple[DiagGaussian, ...]
    z_e: tuple[DiagGaussian, ...]

    def __post_init__(self):
        z_p = tuple(self.z_p)
        z_e = tuple(self.z_e)
        if len(z_p) != len(z_e) or len(z_p) < 1:
            raise GaussianError(
                f"z_p/z_e node counts must match and be >= 1 ({len(z_p)} vs {len(z_e)})"
            )
        object.__setattr__(self, "z_p", z_p)
        object.__setattr__(self, "z_e", z_e)

    @property
    def node_count(self) -> int:
        return len(self.z_p)

    def node_params(self, channel: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (mu, sigma) arrays of shape (N, d) for channel 'p' or 'e'."""
        gs = {"p": self.z_p, "e": self.z_e}[channel]
        return np.stack([g.mu for g in gs]), np.stack([g.sigma for g in gs])


@dataclass(frozen=True)
class UnionTarget:
    """Union measure bookkeeping: kept source atoms, appended scaffold atoms,
    residual (non-appended) scaffold mass, and the normalizer Z."""

    kept_unique_w: np.ndarray  # 1 - r_i per source node
    kept_overlap_w: np.ndarray  # r_i per source node, preserving the source params
    appended: tuple[tuple[int, float, DiagGaussian, DiagGaussian], ...]
    residual_w: float  # mass of scaffold nodes not appended (c_j >= tau_o)
    normalizer: float

    def total_mass(self) -> float:
        appended_mass = sum(w for _, w, _, _ in self.appended)
        return float(
            self.kept_unique_w.sum()
            + self.kept_overlap_w.sum()
            + appended_mass
            + self.residual_w
        )


def union_measure(source: LatentState, scaffold: LatentState, plan, tau_o: float = 0.1) -> UnionTarget:
    """Union of two node measures under a transport plan.

    Source nodes are always kept (unique weight 1 - r_i plus overlap weight r_i,
    parameters preserved from the source); scaffold nodes with column mass
    below tau_o are appended with weight 1 - c_j. Z = N_M + N_M' - rho.
    """
    if not 0.0 < tau_o < 1.0:
        raise GaussianError(f"tau_o must be in (0, 1), got {tau_o}")
    n_m, n_s = plan.shape
    if n_m != source.node_count or n_s != scaffold.node_count:
        raise GaussianError(
            f"plan shape {plan.shape} does not match node counts "
            f"({source.node_count}, {scaffold.node_count})"
        )
    r = np.minimum(plan.plan.sum(axis=1), 1.0)
    c = np.minimum(plan.plan.sum(axis=0), 1.0)
    rho = float(c.sum())
    z = n_m + n_s - rho
    if z <= 0:
        raise GaussianError(f"degenerate union normalizer Z = {z}")
    appended = []
    residual = 0.0
    for j in range(n_s):
        if c[j] < tau_o:
            appended.append((j, float(1.0 - c[j]), scaffold.z_p[j], scaffold.z_e[j]))
        else:
            residual += float(1.0 - c[j])
    return UnionTarget(
        kept_unique_w=1.0 - r,
        kept_overlap_w=r,
        appended=tuple(appended),
        residual_w=residual,
        normalizer=z,
    )
