"""Symbolic-driven latent evolution: operator-induced targets plus gradient
descent on the Gaussian latent parameters (mu, log sigma)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import gaussian as ga
from .gaussian import DiagGaussian, LatentState, NegationInfeasibleError, union_measure
from .lattice import Lattice, UnitCell
from .model import DisentangledVAE
from .transport import SinkhornConfig, TransportPlan, node_cost, sinkhorn_log

OPERATORS = ("union", "mix", "intersect", "negate")


class EvolutionError(ValueError):
    pass


class EvolutionDivergedError(RuntimeError):
    def __init__(self, message: str, trace: "EvolutionTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class EvolutionConfig:
    w_s: float = 1.0
    w_pe: float = 1.0
    w_r: float = 0.5
    w_prior: float = 1e-3
    lr: float = 0.05
    iterations: int = 300
    tau_o: float = 0.1
    lambda_mix: float = 0.5
    alpha: float = 1.0
    beta: float = 0.5
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    recompute_plan: bool = False

    def __post_init__(self):
        if min(self.w_s, self.w_pe, self.w_r, self.w_prior) < 0:
            raise EvolutionError("loss weights must be >= 0")
        if not 0.0 < self.tau_o < 1.0:
            raise EvolutionError("tau_o must be in (0, 1)")
        if self.iterations < 1:
            raise EvolutionError("iterations must be >= 1")


@dataclass(frozen=True)
class OperatorTarget:
    """Operator-induced target distributions, aligned to the source nodes
    (per_source=True) or kept as the raw scaffold node set (union)."""

    operator: str
    semantic: DiagGaussian
    per_source: bool
    mu_p: np.ndarray
    sd_p: np.ndarray
    mu_e: np.ndarray
    sd_e: np.ndarray
    plan: TransportPlan
    unmatched: np.ndarray
    appended: tuple
    snapshot: LatentState
    scaffold: LatentState


@dataclass
class EvolutionTrace:
    l_s: list[float] = field(default_factory=list)
    l_pe: list[float] = field(default_factory=list)
    l_r: list[float] = field(default_factory=list)
    l_prior: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def record(self, l_s, l_pe, l_r, l_prior, total):
        self.l_s.append(l_s)
        self.l_pe.append(l_pe)
        self.l_r.append(l_r)
        self.l_prior.append(l_prior)
        self.total.append(total)


def _node_gaussians(state: LatentState) -> list[DiagGaussian]:
    """Per-node Gaussians over the concatenated position+edge channels."""
    out = []
    for zp, ze in zip(state.z_p, state.z_e):
        out.append(
            DiagGaussian(
                np.concatenate([zp.mu, ze.mu]), np.concatenate([zp.sigma, ze.sigma])
            )
        )
    return out


def _barycenter(weights: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> DiagGaussian:
    """Moment-matched Gaussian barycenter of scaffold nodes under plan-row weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    w = np.full_like(w, 1.0 / len(w)) if total < 1e-12 else w / total
    mean = w @ mu
    second = w @ (sd**2 + mu**2)
    var = np.maximum(second - mean**2, 0.0) + ga.MIX_EPS_STAB
    return DiagGaussian(mean, np.sqrt(var))


def build_target(
    source: LatentState,
    scaffold: LatentState,
    operator: str,
    config: EvolutionConfig | None = None,
) -> OperatorTarget:
    """Sinkhorn-match the node sets and derive per-channel operator targets."""
    config = config or EvolutionConfig()
    if operator not in OPERATORS:
        raise EvolutionError(f"unknown operator {operator!r}")
    plan = sinkhorn_log(
        node_cost(_node_gaussians(source), _node_gaussians(scaffold)), config.sinkhorn
    )
    unmatched = np.flatnonzero(plan.row_mass < config.tau_o)
    s_mu_p, s_sd_p = scaffold.node_params("p")
    s_mu_e, s_sd_e = scaffold.node_params("e")

    if operator == "union":
        target = union_measure(source, scaffold, plan, config.tau_o)
        semantic = ga.mix(source.z_s, scaffold.z_s, 0.5)
        return OperatorTarget(
            operator=operator,
            semantic=semantic,
            per_source=False,
            mu_p=s_mu_p, sd_p=s_sd_p, mu_e=s_mu_e, sd_e=s_sd_e,
            plan=plan,
            unmatched=unmatched,
            appended=target.appended,
            snapshot=source,
            scaffold=scaffold,
        )

    if operator == "mix":
        semantic = ga.mix(source.z_s, scaffold.z_s, config.lambda_mix)
        op = lambda a, b: ga.mix(a, b, config.lambda_mix)
    elif operator == "intersect":
        semantic = ga.intersect(source.z_s, scaffold.z_s)
        op = ga.intersect
    else:
        semantic = ga.negate(source.z_s, scaffold.z_s, config.alpha, config.beta)
        op = lambda a, b: ga.negate(a, b, config.alpha, config.beta)

    tgt = {"p": ([], []), "e": ([], [])}
    for channel, mu_s, sd_s in (("p", s_mu_p, s_sd_p), ("e", s_mu_e, s_sd_e)):
        src_nodes = {"p": source.z_p, "e": source.z_e}[channel]
        for i, src in enumerate(src_nodes):
            bary = _barycenter(plan.plan[i], mu_s, sd_s)
            try:
                node_target = op(src, bary)
            except NegationInfeasibleError as exc:
                raise NegationInfeasibleError(exc.coords) from exc
            tgt[channel][0].append(node_target.mu)
            tgt[channel][1].append(node_target.sigma)
    return OperatorTarget(
        operator=operator,
        semantic=semantic,
        per_source=True,
        mu_p=np.stack(tgt["p"][0]), sd_p=np.stack(tgt["p"][1]),
        mu_e=np.stack(tgt["e"][0]), sd_e=np.stack(tgt["e"][1]),
        plan=plan,
        unmatched=unmatched,
        appended=(),
        snapshot=source,
        scaffold=scaffold,
    )


def _kl_t(mu_a, sd_a, mu_b, sd_b):
    return (
        torch.log(sd_b / sd_a)
        + (sd_a**2 + (mu_a - mu_b) ** 2) / (2 * sd_b**2)
        - 0.5
    ).sum(-1)


def _const(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.array(x), dtype=torch.float64)


def _loss_terms_t(params: dict[str, torch.Tensor], target: OperatorTarget, plan_t: torch.Tensor):
    """The four objective terms as torch scalars, for a given (possibly refreshed)
    transport plan tensor."""
    sig = {k: torch.exp(v) for k, v in params.items() if k.startswith("log_")}
    mu_p, sd_p = params["mu_p"], sig["log_p"]
    mu_e, sd_e = params["mu_e"], sig["log_e"]
    l_s = _kl_t(
        params["mu_s"], sig["log_s"], _const(target.semantic.mu), _const(target.semantic.sigma)
    )
    if target.per_source:
        weights = plan_t.sum(dim=1)
        l_pe = (weights * _kl_t(mu_p, sd_p, _const(target.mu_p), _const(target.sd_p))).sum()
        l_pe = l_pe + (
            weights * _kl_t(mu_e, sd_e, _const(target.mu_e), _const(target.sd_e))
        ).sum()
    else:
        kl_p = _kl_t(
            mu_p[:, None, :], sd_p[:, None, :],
            _const(target.mu_p)[None, :, :], _const(target.sd_p)[None, :, :],
        )
        kl_e = _kl_t(
            mu_e[:, None, :], sd_e[:, None, :],
            _const(target.mu_e)[None, :, :], _const(target.sd_e)[None, :, :],
        )
        l_pe = (plan_t * (kl_p + kl_e)).sum()
    snap_mu_p, snap_sd_p = target.snapshot.node_params("p")
    snap_mu_e, snap_sd_e = target.snapshot.node_params("e")
    idx = torch.as_tensor(target.unmatched, dtype=torch.long)
    if len(idx):
        l_r = _kl_t(
            mu_p[idx], sd_p[idx], _const(snap_mu_p[target.unmatched]), _const(snap_sd_p[target.unmatched])
        ).sum() + _kl_t(
            mu_e[idx], sd_e[idx], _const(snap_mu_e[target.unmatched]), _const(snap_sd_e[target.unmatched])
        ).sum()
    else:
        l_r = torch.zeros((), dtype=torch.float64)
    l_prior = (
        (params["mu_l"] ** 2).sum()
        + (params["mu_s"] ** 2).sum()
        + (mu_p**2).sum()
        + (mu_e**2).sum()
    )
    return l_s, l_pe, l_r, l_prior


def _state_params(state: LatentState, requires_grad: bool) -> dict[str, torch.Tensor]:
    mu_p, sd_p = state.node_params("p")
    mu_e, sd_e = state.node_params("e")
    raw = {
        "mu_l": state.z_l.mu, "log_l": np.log(state.z_l.sigma),
        "mu_s": state.z_s.mu, "log_s": np.log(state.z_s.sigma),
        "mu_p": mu_p, "log_p": np.log(sd_p),
        "mu_e": mu_e, "log_e": np.log(sd_e),
    }
    return {
        k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad)
        for k, v in raw.items()
    }


def loss_terms(state: LatentState, target: OperatorTarget) -> tuple[float, float, float, float]:
    """(L_s, L_pe, L_r, L_prior) evaluated at a latent state."""
    params = _state_params(state, requires_grad=False)
    with torch.no_grad():
        terms = _loss_terms_t(params, target, _const(target.plan.plan))
    return tuple(float(t) for t in terms)


def _recompute_plan(params: dict[str, torch.Tensor], target: OperatorTarget, config: EvolutionConfig) -> np.ndarray:
    with torch.no_grad():
        mu = torch.cat([params["mu_p"], params["mu_e"]], dim=1).numpy()
        sd = np.exp(torch.cat([params["log_p"], params["log_e"]], dim=1).numpy())
    current = [DiagGaussian(mu[i], sd[i]) for i in range(mu.shape[0])]
    return sinkhorn_log(
        node_cost(current, _node_gaussians(target.scaffold)), config.sinkhorn
    ).plan


def evolve(
    source: LatentState, target: OperatorTarget, config: EvolutionConfig | None = None
) -> tuple[LatentState, EvolutionTrace]:
    """Gradient descent on (mu, log sigma) of every channel against the weighted
    objective; the transport plan stays frozen unless config.recompute_plan.

    Union-appended scaffold atoms bypass optimization and are attached to the
    returned state."""
    config = config or EvolutionConfig()
    params = _state_params(source, requires_grad=True)
    trace = EvolutionTrace()
    plan_np = target.plan.plan
    for _ in range(config.iterations):
        if config.recompute_plan:
            plan_np = _recompute_plan(params, target, config)
        l_s, l_pe, l_r, l_prior = _loss_terms_t(params, target, _const(plan_np))
        total = (
            config.w_s * l_s + config.w_pe * l_pe + config.w_r * l_r + config.w_prior * l_prior
        )
        trace.record(
            l_s.item(), l_pe.item(), l_r.item(), l_prior.item(), total.item()
        )
        if not np.isfinite(trace.total[-1]):
            raise EvolutionDivergedError("non-finite evolution loss", trace)
        for p in params.values():
            if p.grad is not None:
                p.grad = None
        total.backward()
        with torch.no_grad():
            for p in params.values():
                if p.grad is not None:
                    p -= config.lr * p.grad
    with torch.no_grad():
        l_s, l_pe, l_r, l_prior = _loss_terms_t(params, target, _const(plan_np))
        total = (
            config.w_s * l_s + config.w_pe * l_pe + config.w_r * l_r + config.w_prior * l_prior
        )
        trace.record(float(l_s), float(l_pe), float(l_r), float(l_prior), float(total))
    mu_p = params["mu_p"].detach().numpy()
    sd_p = np.exp(params["log_p"].detach().numpy())
    mu_e = params["mu_e"].detach().numpy()
    sd_e = np.exp(params["log_e"].detach().numpy())
    z_p = [DiagGaussian(mu_p[i], sd_p[i]) for i in range(mu_p.shape[0])]
    z_e = [DiagGaussian(mu_e[i], sd_e[i]) for i in range(mu_e.shape[0])]
    for _, _, g_p, g_e in target.appended:
        z_p.append(g_p)
        z_e.append(g_e)
    evolved = LatentState(
        z_l=DiagGaussian(
            params["mu_l"].detach().numpy(), np.exp(params["log_l"].detach().numpy())
        ),
        z_s=DiagGaussian(
            params["mu_s"].detach().numpy(), np.exp(params["log_s"].detach().numpy())
        ),
        z_p=tuple(z_p),
        z_e=tuple(z_e),
    )
    return evolved, trace


def generate_evolved(
    source: Lattice,
    scaffold_cell: UnitCell,
    operator: str,
    model: DisentangledVAE,
    config: EvolutionConfig | None = None,
    seed: int = 0,
) -> tuple[Lattice, EvolutionTrace]:
    """Encode source and scaffold, build the operator target, evolve, decode."""
    config = config or EvolutionConfig()
    source_state = model.encode(source)
    scaffold_state = model.encode(Lattice(vectors=np.eye(3), cell=scaffold_cell))
    target = build_target(source_state, scaffold_state, operator, config)
    evolved, trace = evolve(source_state, target, config)
    decoded, _ = model.decode(evolved, seed=seed)
    return decoded, trace
