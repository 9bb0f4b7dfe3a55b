"""Disentangled autoencoder over lattices: four-channel Gaussian encoder, decoder
heads per channel, ELBO training, and the property-predictor head.

Everything runs in float64 on CPU so analytic (autodiff) gradients can be
checked against central finite differences.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .gaussian import DiagGaussian, LatentState
from .lattice import Lattice, UnitCell

CHECKPOINT_VERSION = 1
_LOG_SIGMA_CLAMP = 8.0
# Posterior log-sigma floor.  Without it the encoder sharpens sigma toward
# e^-8, and the latent-space KL objectives used downstream become stiff
# (curvature ~ 1/sigma^2) beyond what first-order updates can handle.
_LOG_SIGMA_FLOOR = -1.5
# Fixed observation variance for the Gaussian reconstruction terms.  Unit-cell
# coordinates and normalized properties live at ~1e-2 scale, so with unit
# observation noise a collapsed posterior is ELBO-optimal; a tighter noise
# floor makes reconstruction worth its KL cost.
_OBS_VAR = 0.01
# Matching replication weight for the Bernoulli edge likelihood, without which
# the edge channel collapses while the sharpened Gaussian terms stay active.
_EDGE_WEIGHT = 20.0


class ModelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ModelConfig:
    d_l: int = 4
    d_p: int = 4
    d_e: int = 4
    d_s: int = 4
    d_y: int = 3
    hidden: int = 32
    rounds: int = 2
    lr: float = 1e-3
    epochs: int = 300
    patience: int = 50
    batch_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.d_l, self.d_p, self.d_e, self.d_s, self.d_y, self.hidden) < 1:
            raise ModelError("latent/hidden dims must be positive")
        if self.rounds < 0:
            raise ModelError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(), nn.Linear(hidden, d_out))


def _kl_std_normal(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma) || N(0, I)), summed over all elements."""
    return (-torch.log(sigma) + 0.5 * (sigma**2 + mu**2) - 0.5).sum()


class DisentangledVAE(nn.Module):
    """Shared node-embedding trunk with mean-neighborhood aggregation, split into
    per-channel Gaussian heads; graph-level channels are mean-pooled."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h, cfg = config.hidden, config
        self.embed = nn.Linear(4, h)
        self.self_layers = nn.ModuleList(nn.Linear(h, h) for _ in range(cfg.rounds))
        self.nbr_layers = nn.ModuleList(nn.Linear(h, h) for _ in range(cfg.rounds))
        self.head_p = nn.Linear(h, 2 * cfg.d_p)
        self.head_e = nn.Linear(h, 2 * cfg.d_e)
        self.head_l = nn.Linear(h + 9, 2 * cfg.d_l)
        self.head_s = nn.Linear(h + 9, 2 * cfg.d_s)
        self.dec_l = _mlp(cfg.d_l + cfg.d_y, h, 9)
        self.dec_p = _mlp(cfg.d_p + cfg.d_y, h, 3)
        self.dec_e = _mlp(2 * cfg.d_e + cfg.d_y, h, 1)
        self.head_y = _mlp(cfg.d_s, h, cfg.d_y)
        self.register_buffer("y_min", torch.zeros(cfg.d_y))
        self.register_buffer("y_max", torch.ones(cfg.d_y))
        # start the posteriors at the sigma floor so the decoder sees signal
        # through the reparameterized samples early on; a unit-sigma start
        # collapses every channel onto the prior before reconstruction can bite
        with torch.no_grad():
            for head, d in (
                (self.head_p, cfg.d_p), (self.head_e, cfg.d_e),
                (self.head_l, cfg.d_l), (self.head_s, cfg.d_s),
            ):
                head.bias[d:] = _LOG_SIGMA_FLOOR
        self.double()

    # -- property normalization -------------------------------------------------
    def set_norm_stats(self, y_min: np.ndarray, y_max: np.ndarray):
        self.y_min.copy_(torch.as_tensor(y_min, dtype=torch.float64))
        self.y_max.copy_(torch.as_tensor(y_max, dtype=torch.float64))

    def normalize_y(self, y: torch.Tensor) -> torch.Tensor:
        span = torch.clamp(self.y_max - self.y_min, min=1e-12)
        return (y - self.y_min) / span

    def denormalize_y(self, y_norm: torch.Tensor) -> torch.Tensor:
        span = torch.clamp(self.y_max - self.y_min, min=1e-12)
        return y_norm * span + self.y_min

    # -- encoder ----------------------------------------------------------------
    def _node_embeddings(self, lat: Lattice) -> torch.Tensor:
        cell = lat.cell
        n = cell.n_nodes
        feats = torch.zeros((n, 4), dtype=torch.float64)
        feats[:, :3] = torch.as_tensor(np.array(cell.nodes), dtype=torch.float64)
        deg = torch.as_tensor(cell.degrees(), dtype=torch.float64)
        feats[:, 3] = deg / 8.0
        adj = torch.zeros((n, n), dtype=torch.float64)
        for i, j in cell.edges:
            adj[i, j] = adj[j, i] = 1.0
        nbr_norm = adj / torch.clamp(deg[:, None], min=1.0)
        h = torch.tanh(self.embed(feats))
        for self_lin, nbr_lin in zip(self.self_layers, self.nbr_layers):
            h = torch.tanh(self_lin(h) + nbr_lin(nbr_norm @ h))
        return h

    def _split_gaussian(self, raw: torch.Tensor, d: int):
        mu, log_sigma = raw[..., :d], raw[..., d:]
        sigma = torch.exp(torch.clamp(log_sigma, _LOG_SIGMA_FLOOR, _LOG_SIGMA_CLAMP))
        return mu, sigma

    def encode_tensors(self, lat: Lattice) -> dict[str, torch.Tensor]:
        cfg = self.config
        h = self._node_embeddings(lat)
        pooled = torch.cat(
            [h.mean(dim=0), torch.as_tensor(np.array(lat.vectors).ravel(), dtype=torch.float64)]
        )
        mu_p, sd_p = self._split_gaussian(self.head_p(h), cfg.d_p)
        mu_e, sd_e = self._split_gaussian(self.head_e(h), cfg.d_e)
        mu_l, sd_l = self._split_gaussian(self.head_l(pooled), cfg.d_l)
        mu_s, sd_s = self._split_gaussian(self.head_s(pooled), cfg.d_s)
        return {
            "mu_l": mu_l, "sd_l": sd_l, "mu_s": mu_s, "sd_s": sd_s,
            "mu_p": mu_p, "sd_p": sd_p, "mu_e": mu_e, "sd_e": sd_e,
        }

    def encode(self, lat: Lattice) -> LatentState:
        with torch.no_grad():
            t = self.encode_tensors(lat)
        def gauss(mu, sd):
            return DiagGaussian(mu.numpy(), sd.numpy())
        n = lat.cell.n_nodes
        return LatentState(
            z_l=gauss(t["mu_l"], t["sd_l"]),
            z_s=gauss(t["mu_s"], t["sd_s"]),
            z_p=tuple(gauss(t["mu_p"][i], t["sd_p"][i]) for i in range(n)),
            z_e=tuple(gauss(t["mu_e"][i], t["sd_e"][i]) for i in range(n)),
        )

    # -- decoder ----------------------------------------------------------------
    def _decode_tensors(self, z_l, z_p, z_e, z_s, y_cond: torch.Tensor | None):
        n = z_p.shape[0]
        if y_cond is None:
            y_cond = torch.zeros(self.config.d_y, dtype=torch.float64)
        l_pred = torch.eye(3, dtype=torch.float64) + self.dec_l(
            torch.cat([z_l, y_cond])
        ).reshape(3, 3)
        p_in = torch.cat([z_p, y_cond.expand(n, -1)], dim=1)
        p_pred = self.dec_p(p_in)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        if pairs:
            ii = torch.tensor([p[0] for p in pairs])
            jj = torch.tensor([p[1] for p in pairs])
            feats = torch.cat(
                [z_e[ii] + z_e[jj], z_e[ii] * z_e[jj], y_cond.expand(len(pairs), -1)],
                dim=1,
            )
            edge_logits = self.dec_e(feats).squeeze(-1)
        else:
            edge_logits = torch.zeros(0, dtype=torch.float64)
        y_pred_norm = self.head_y(z_s)
        return l_pred, p_pred, pairs, edge_logits, y_pred_norm

    def decode(
        self, state: LatentState, seed: int, y_cond: np.ndarray | None = None
    ) -> tuple[Lattice, np.ndarray]:
        """Sample each channel (seeded) and decode a lattice plus predicted y."""
        gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
        def draw(mu, sd):
            mu_t = torch.as_tensor(np.array(mu), dtype=torch.float64)
            sd_t = torch.as_tensor(np.array(sd), dtype=torch.float64)
            return mu_t + sd_t * torch.randn(mu_t.shape, generator=gen, dtype=torch.float64)
        mu_p, sd_p = state.node_params("p")
        mu_e, sd_e = state.node_params("e")
        y_t = None if y_cond is None else torch.as_tensor(y_cond, dtype=torch.float64)
        with torch.no_grad():
            z_l = draw(state.z_l.mu, state.z_l.sigma)
            z_s = draw(state.z_s.mu, state.z_s.sigma)
            z_p = draw(mu_p, sd_p)
            z_e = draw(mu_e, sd_e)
            l_pred, p_pred, pairs, logits, y_norm = self._decode_tensors(
                z_l, z_p, z_e, z_s, y_t
            )
            probs = torch.sigmoid(logits)
            y_pred = self.denormalize_y(y_norm).numpy()
        edges = [pairs[k] for k in range(len(pairs)) if probs[k].item() > 0.5]
        cell = UnitCell(p_pred.numpy(), edges)
        return Lattice(vectors=l_pred.numpy(), cell=cell, properties=y_pred), y_pred

    # -- ELBO -------------------------------------------------------------------
    def elbo(self, lat: Lattice, seed: int) -> dict[str, torch.Tensor]:
        """Per-lattice loss breakdown; "total" is the sum of every reported part.

        Reconstruction terms are negative Gaussian/Bernoulli log-likelihoods up
        to constants (squared error / pairwise cross-entropy); KL terms are
        closed-form against the standard-normal prior.
        """
        enc = self.encode_tensors(lat)
        gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
        def draw(mu, sd):
            return mu + sd * torch.randn(mu.shape, generator=gen, dtype=torch.float64)
        z_l, z_s = draw(enc["mu_l"], enc["sd_l"]), draw(enc["mu_s"], enc["sd_s"])
        z_p, z_e = draw(enc["mu_p"], enc["sd_p"]), draw(enc["mu_e"], enc["sd_e"])
        l_pred, p_pred, pairs, logits, y_norm = self._decode_tensors(
            z_l, z_p, z_e, z_s, None
        )
        l_true = torch.as_tensor(np.array(lat.vectors), dtype=torch.float64)
        p_true = torch.as_tensor(np.array(lat.cell.nodes), dtype=torch.float64)
        parts: dict[str, torch.Tensor] = {}
        parts["recon_l"] = 0.5 * ((l_pred - l_true) ** 2).sum() / _OBS_VAR
        parts["recon_p"] = 0.5 * ((p_pred - p_true) ** 2).sum() / _OBS_VAR
        if pairs:
            edge_set = set(lat.cell.edges)
            target = torch.tensor(
                [1.0 if p in edge_set else 0.0 for p in pairs], dtype=torch.float64
            )
            parts["recon_e"] = _EDGE_WEIGHT * nn.functional.binary_cross_entropy_with_logits(
                logits, target, reduction="sum"
            )
        else:
            parts["recon_e"] = torch.zeros((), dtype=torch.float64)
        if lat.properties is not None:
            y_true = self.normalize_y(
                torch.as_tensor(np.array(lat.properties), dtype=torch.float64)
            )
            parts["recon_y"] = 0.5 * ((y_norm - y_true) ** 2).sum() / _OBS_VAR
        else:
            parts["recon_y"] = torch.zeros((), dtype=torch.float64)
        parts["kl_l"] = _kl_std_normal(enc["mu_l"], enc["sd_l"])
        parts["kl_p"] = _kl_std_normal(enc["mu_p"], enc["sd_p"])
        parts["kl_e"] = _kl_std_normal(enc["mu_e"], enc["sd_e"])
        parts["kl_s"] = _kl_std_normal(enc["mu_s"], enc["sd_s"])
        parts["total"] = sum(parts.values())
        return parts


@dataclass
class TrainReport:
    history: list[dict[str, float]]
    best_epoch: int
    model: DisentangledVAE


def train_model(dataset: list[Lattice], config: ModelConfig) -> TrainReport:
    """Mini-batch Adam on the mean ELBO loss; keeps the lowest-loss checkpoint.

    Deterministic for a fixed (dataset, config): the batch order and every
    reparameterized draw are seeded from config.seed.
    """
    if not dataset:
        raise ModelError("empty training dataset")
    torch.manual_seed(config.seed)
    model = DisentangledVAE(config)
    labelled = [lat.properties for lat in dataset if lat.properties is not None]
    if labelled:
        ys = np.stack(labelled)
        model.set_norm_stats(ys.min(axis=0), ys.max(axis=0))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: list[dict[str, float]] = []
    best_loss, best_epoch, best_state = float("inf"), -1, None
    stale = 0
    bs = max(1, min(config.batch_size, len(dataset)))
    warmup = max(1, config.epochs // 2)
    for epoch in range(config.epochs):
        # KL warm-up: ramping the prior terms in avoids posterior collapse
        # before the decoder has learned to read the latents
        beta = min(1.0, (epoch + 1) / warmup)
        gen = torch.Generator().manual_seed((config.seed * 1000003 + epoch) & (2**63 - 1))
        order = torch.randperm(len(dataset), generator=gen).tolist()
        sums: dict[str, float] = {}
        for start in range(0, len(dataset), bs):
            batch = order[start:start + bs]
            opt.zero_grad()
            total = torch.zeros((), dtype=torch.float64)
            for k in batch:
                parts = model.elbo(
                    dataset[k], seed=config.seed * 1000003 + epoch * 1009 + k
                )
                recon = (
                    parts["recon_l"] + parts["recon_p"] + parts["recon_e"] + parts["recon_y"]
                )
                kl = parts["kl_l"] + parts["kl_p"] + parts["kl_e"] + parts["kl_s"]
                total = total + recon + beta * kl
                for key, val in parts.items():
                    sums[key] = sums.get(key, 0.0) + float(val.detach())
            (total / len(batch)).backward()
            opt.step()
        record = {key: val / len(dataset) for key, val in sums.items()}
        record["epoch"] = epoch
        history.append(record)
        if not np.isfinite(record["total"]):
            raise TrainingDivergedError(
                f"non-finite training loss at epoch {epoch}", history
            )
        if record["total"] < best_loss - 1e-12:
            best_loss, best_epoch = record["total"], epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainReport(history=history, best_epoch=best_epoch, model=model)


def _backbone_state(model: DisentangledVAE) -> dict[str, torch.Tensor]:
    return {
        k: v.clone() for k, v in model.state_dict().items() if not k.startswith("head_y")
    }


def train_predictor(
    dataset: list[Lattice],
    model: DisentangledVAE,
    epochs: int = 300,
    lr: float = 1e-3,
    patience: int = 30,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> dict:
    """Train only the property head (backbone frozen) with MSE and early stopping
    on a held-out validation slice. Returns a small fit report."""
    labelled = [lat for lat in dataset if lat.properties is not None]
    if not labelled:
        raise ModelError("no labelled lattices in dataset")
    before = _backbone_state(model)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labelled))
    n_val = max(1, int(round(val_fraction * len(labelled)))) if len(labelled) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    with torch.no_grad():
        feats, targets = [], []
        for lat in labelled:
            enc = model.encode_tensors(lat)
            feats.append(enc["mu_s"])
            targets.append(
                model.normalize_y(torch.as_tensor(np.array(lat.properties), dtype=torch.float64))
            )
        x = torch.stack(feats)
        y = torch.stack(targets)
    train_mask = torch.tensor([i not in val_idx for i in range(len(labelled))])
    x_tr, y_tr = x[train_mask], y[train_mask]
    x_val, y_val = x[~train_mask], y[~train_mask]
    for p in model.parameters():
        p.requires_grad_(False)
    head_params = list(model.head_y.parameters())
    for p in head_params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(head_params, lr=lr)
    best_val, best_head, stale = float("inf"), None, 0
    val_curve = []
    for epoch in range(epochs):
        opt.zero_grad()
        loss = ((model.head_y(x_tr) - y_tr) ** 2).mean()
        loss.backward()
        opt.step()
        with torch.no_grad():
            val = (
                float(((model.head_y(x_val) - y_val) ** 2).mean())
                if len(x_val)
                else float(loss)
            )
        val_curve.append(val)
        if val < best_val - 1e-12:
            best_val, stale = val, 0
            best_head = copy.deepcopy(model.head_y.state_dict())
        else:
            stale += 1
            if stale > patience:
                break
    if best_head is not None:
        model.head_y.load_state_dict(best_head)
    for p in model.parameters():
        p.requires_grad_(True)
    after = _backbone_state(model)
    for key in before:
        if not torch.equal(before[key], after[key]):
            raise ModelError(f"backbone weights changed during predictor training: {key}")
    return {"best_val_mse": best_val, "epochs_run": len(val_curve), "val_curve": val_curve}


def predict_properties(lat: Lattice, model: DisentangledVAE) -> np.ndarray:
    """Posterior-mean semantic latent through the property head, de-normalized."""
    with torch.no_grad():
        enc = model.encode_tensors(lat)
        y = model.denormalize_y(model.head_y(enc["mu_s"]))
    return y.numpy()


def save_checkpoint(model: DisentangledVAE, path: str):
    state = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "weights": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in model.state_dict().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(state, fh)


def load_checkpoint(path: str) -> DisentangledVAE:
    with open(path) as fh:
        state = json.load(fh)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {state.get('version')!r}")
    model = DisentangledVAE(ModelConfig(**state["config"]))
    weights = {
        k: torch.tensor(v["data"], dtype=torch.float64).reshape(v["shape"])
        for k, v in state["weights"].items()
    }
    model.load_state_dict(weights)
    return model
