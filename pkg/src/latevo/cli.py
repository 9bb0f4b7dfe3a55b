"""Single-executable CLI for the pipeline: synthesis, training, evolution,
metrics, prediction, the agent loop, and tiled export.

Every command prints a single JSON document on stdout. Exit codes: 0 success,
1 validation error (bad input/config), 2 runtime failure. A JSON config file
(--config) supplies defaults; explicit flags win.
"""
from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .agents import (
    AgentError,
    HttpChatClient,
    LoopConfig,
    MockChatClient,
    run_design_loop,
)
from .evolution import (
    OPERATORS,
    EvolutionConfig,
    EvolutionError,
    build_target,
    evolve,
)
from .gaussian import GaussianError
from .lattice import (
    FAMILIES,
    Lattice,
    LatticeError,
    UnitCell,
    lattice_to_dict,
    parse_lattice,
    parse_scaffold_text,
    serialize_lattice,
    synth_family,
    tile,
    validate_cell,
)
from .metrics import (
    MetricError,
    coverage_recall,
    periodicity_valid,
    periodicity_validity,
    repeat_ratio,
    symmetry_score,
    symmetry_validity,
)
from .model import (
    ModelConfig,
    ModelError,
    load_checkpoint,
    predict_properties,
    save_checkpoint,
    train_model,
    train_predictor,
)
from .transport import TransportError

_VALIDATION_ERRORS = (
    LatticeError,
    MetricError,
    GaussianError,
    TransportError,
    EvolutionError,
    ModelError,
    AgentError,
    click.UsageError,
    FileNotFoundError,
)

_KNOWN_CONFIG_KEYS = {
    "seed", "count", "families", "jitter", "epochs", "lr", "hidden", "latent_dim",
    "rounds", "patience", "operator", "lambda_mix", "alpha", "beta", "iterations",
    "eps_sym", "eps_per", "eps_cov", "eps_rep", "tau_ds", "tau_gs", "max_iters",
    "tau_o", "w_s", "w_pe", "w_r", "w_prior",
}


def _emit(payload: dict):
    click.echo(json.dumps(payload, sort_keys=True))


def _fail(code: int, message: str):
    print(json.dumps({"error": message}), file=sys.stderr)
    sys.exit(code)


def command_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _VALIDATION_ERRORS as exc:
            _fail(1, str(exc))
        except SystemExit:
            raise
        except Exception as exc:  # noqa: BLE001 - runtime failure contract
            _fail(2, f"{type(exc).__name__}: {exc}")

    return wrapper


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise LatticeError("config file must contain a JSON object")
    unknown = sorted(set(cfg) - _KNOWN_CONFIG_KEYS)
    if unknown:
        raise LatticeError(f"unknown config keys: {unknown}")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    """Flag value if given, else config value, else default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def _load_dataset(directory: str) -> list[Lattice]:
    paths = sorted(p for p in Path(directory).glob("*.json") if p.name != "manifest.json")
    if not paths:
        raise LatticeError(f"no lattice JSON files in {directory}")
    return [parse_lattice(p.read_bytes()) for p in paths]


def _load_structure(path: str) -> Lattice:
    """Lattice JSON or scaffold text; scaffold cells get an identity L."""
    raw = Path(path).read_bytes()
    try:
        return parse_lattice(raw)
    except LatticeError:
        cell = parse_scaffold_text(raw.decode("utf-8"))
        return Lattice(vectors=np.eye(3), cell=cell)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config file with defaults; flags win.")
@click.pass_context
def main(ctx, config_path):
    """Symbolic latent evolution toolkit for truss-lattice metamaterials."""
    ctx.ensure_object(dict)
    try:
        ctx.obj["cfg"] = _load_config(config_path)
    except _VALIDATION_ERRORS as exc:
        _fail(1, str(exc))


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--count", type=int, default=None)
@click.option("--families", default=None, help="comma-separated family list")
@click.option("--jitter", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
@command_errors
def synth(ctx, out, count, families, jitter, seed):
    """Write synthetic lattices plus a manifest to a directory."""
    cfg = ctx.obj["cfg"]
    count = int(_pick(count, cfg, "count", 10))
    families = _pick(families, cfg, "families", ",".join(FAMILIES))
    jitter = float(_pick(jitter, cfg, "jitter", 0.0))
    seed = int(_pick(seed, cfg, "seed", 0))
    fams = [f.strip() for f in families.split(",") if f.strip()]
    for f in fams:
        if f not in FAMILIES:
            raise LatticeError(f"unknown family {f!r} (choose from {FAMILIES})")
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k in range(count):
        fam = fams[k % len(fams)]
        lat = synth_family(fam, jitter, seed + k)
        fname = f"lattice_{k:04d}.json"
        (outdir / fname).write_bytes(serialize_lattice(lat))
        manifest.append(
            {"file": fname, "family": fam, "seed": seed + k,
             "properties": [float(v) for v in lat.properties]}
        )
    (outdir / "manifest.json").write_text(json.dumps({"lattices": manifest}, sort_keys=True))
    _emit({"written": len(manifest), "dir": str(outdir)})


def _model_config(cfg, epochs, lr, hidden, latent_dim, rounds, patience, seed):
    d = int(_pick(latent_dim, cfg, "latent_dim", 4))
    return ModelConfig(
        d_l=d, d_p=d, d_e=d, d_s=d,
        hidden=int(_pick(hidden, cfg, "hidden", 32)),
        rounds=int(_pick(rounds, cfg, "rounds", 2)),
        lr=float(_pick(lr, cfg, "lr", 1e-3)),
        epochs=int(_pick(epochs, cfg, "epochs", 300)),
        patience=int(_pick(patience, cfg, "patience", 50)),
        seed=int(_pick(seed, cfg, "seed", 0)),
    )


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
@command_errors
def train(ctx, data, out, epochs, lr, hidden, latent_dim, rounds, patience, seed):
    """Train the disentangled autoencoder on a lattice directory."""
    cfg = ctx.obj["cfg"]
    config = _model_config(cfg, epochs, lr, hidden, latent_dim, rounds, patience, seed)
    dataset = _load_dataset(data)
    report = train_model(dataset, config)
    save_checkpoint(report.model, out)
    _emit(
        {
            "checkpoint": out,
            "epochs_run": len(report.history),
            "best_epoch": report.best_epoch,
            "best_loss": report.history[report.best_epoch]["total"],
            "initial_loss": report.history[0]["total"],
        }
    )


@main.command("train-predictor")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
@command_errors
def train_predictor_cmd(ctx, data, ckpt, out, epochs, lr, seed):
    """Fine-tune the property head on a frozen backbone."""
    cfg = ctx.obj["cfg"]
    model = load_checkpoint(ckpt)
    dataset = _load_dataset(data)
    report = train_predictor(
        dataset,
        model,
        epochs=int(_pick(epochs, cfg, "epochs", 300)),
        lr=float(_pick(lr, cfg, "lr", 1e-3)),
        seed=int(_pick(seed, cfg, "seed", 0)),
    )
    save_checkpoint(model, out)
    _emit({"checkpoint": out, "best_val_mse": report["best_val_mse"],
           "epochs_run": report["epochs_run"]})


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@command_errors
def encode(ckpt, input_path):
    """Encode a lattice to its four-channel latent state."""
    model = load_checkpoint(ckpt)
    state = model.encode(_load_structure(input_path))
    def dump(g):
        return {"mu": [float(v) for v in g.mu], "sigma": [float(v) for v in g.sigma]}
    _emit(
        {
            "z_l": dump(state.z_l),
            "z_s": dump(state.z_s),
            "z_p": [dump(g) for g in state.z_p],
            "z_e": [dump(g) for g in state.z_e],
        }
    )


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@command_errors
def predict(ckpt, input_path):
    """Predict mechanical properties of a lattice or scaffold."""
    model = load_checkpoint(ckpt)
    y = predict_properties(_load_structure(input_path), model)
    _emit({"young": float(y[0]), "shear": float(y[1]), "poisson": float(y[2])})


@main.command("evolve")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--source", required=True, type=click.Path(exists=True))
@click.option("--scaffold", required=True, type=click.Path(exists=True))
@click.option("--op", "operator", type=click.Choice(OPERATORS), default=None)
@click.option("--lambda", "lambda_mix", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="write the decoded lattice here")
@click.option("--trace-out", type=click.Path(), default=None)
@click.option("--plan-out", type=click.Path(), default=None, help="debug: dump the transport plan")
@click.pass_context
@command_errors
def evolve_cmd(ctx, ckpt, source, scaffold, operator, lambda_mix, alpha, beta,
               iters, seed, out, trace_out, plan_out):
    """Evolve a source lattice toward a scaffold under a symbolic operator."""
    cfg = ctx.obj["cfg"]
    model = load_checkpoint(ckpt)
    config = EvolutionConfig(
        lambda_mix=float(_pick(lambda_mix, cfg, "lambda_mix", 0.5)),
        alpha=float(_pick(alpha, cfg, "alpha", 1.0)),
        beta=float(_pick(beta, cfg, "beta", 0.5)),
        iterations=int(_pick(iters, cfg, "iterations", 300)),
        tau_o=float(_pick(None, cfg, "tau_o", 0.1)),
        w_s=float(_pick(None, cfg, "w_s", 1.0)),
        w_pe=float(_pick(None, cfg, "w_pe", 1.0)),
        w_r=float(_pick(None, cfg, "w_r", 0.5)),
        w_prior=float(_pick(None, cfg, "w_prior", 1e-3)),
    )
    operator = _pick(operator, cfg, "operator", "mix")
    seed = int(_pick(seed, cfg, "seed", 0))
    source_state = model.encode(_load_structure(source))
    scaffold_state = model.encode(_load_structure(scaffold))
    target = build_target(source_state, scaffold_state, operator, config)
    evolved, trace = evolve(source_state, target, config)
    decoded, y_pred = model.decode(evolved, seed=seed)
    if out:
        Path(out).write_bytes(serialize_lattice(decoded))
    if trace_out:
        Path(trace_out).write_text(
            json.dumps(
                {"l_s": trace.l_s, "l_pe": trace.l_pe, "l_r": trace.l_r,
                 "l_prior": trace.l_prior, "total": trace.total},
                sort_keys=True,
            )
        )
    if plan_out:
        Path(plan_out).write_text(
            json.dumps(
                {"plan": [[float(v) for v in row] for row in target.plan.plan],
                 "row_mass": [float(v) for v in target.plan.row_mass],
                 "col_mass": [float(v) for v in target.plan.col_mass],
                 "rho": target.plan.rho},
                sort_keys=True,
            )
        )
    _emit(
        {
            "operator": operator,
            "nodes": decoded.cell.n_nodes,
            "edges": len(decoded.cell.edges),
            "initial_loss": trace.total[0],
            "final_loss": trace.total[-1],
            "predicted_properties": [float(v) for v in y_pred],
            "lattice": lattice_to_dict(decoded) if not out else None,
            "out": out,
        }
    )


@main.command("metrics")
@click.option("--dir", "directory", required=True, type=click.Path(exists=True))
@click.option("--reference", type=click.Path(exists=True), default=None,
              help="test-set directory for coverage recall")
@click.option("--eps-sym", type=float, default=None)
@click.option("--eps-per", type=float, default=None)
@click.option("--eps-cov", type=float, default=None)
@click.option("--eps-rep", type=float, default=None)
@click.pass_context
@command_errors
def metrics_cmd(ctx, directory, reference, eps_sym, eps_per, eps_cov, eps_rep):
    """Validity and diversity report for a directory of lattice JSON files."""
    cfg = ctx.obj["cfg"]
    eps_sym = float(_pick(eps_sym, cfg, "eps_sym", 0.05))
    eps_per = float(_pick(eps_per, cfg, "eps_per", 0.05))
    eps_cov = float(_pick(eps_cov, cfg, "eps_cov", 0.15))
    eps_rep = float(_pick(eps_rep, cfg, "eps_rep", 0.05))
    lats = _load_dataset(directory)
    cells = [l.cell for l in lats]
    per_structure = [
        {
            "name": lat.name,
            "symmetry": symmetry_score(lat.cell, eps_sym) if lat.cell.n_nodes >= 2 else None,
            "periodic": periodicity_valid(lat, eps_per),
        }
        for lat in lats
    ]
    cov = None
    if reference:
        ref = [l.cell for l in _load_dataset(reference)]
        cov = coverage_recall(cells, ref, eps_cov)
    _emit(
        {
            "v_s": symmetry_validity([c for c in cells if c.n_nodes >= 2], eps_sym),
            "v_p": periodicity_validity(lats, eps_per),
            "cov_r": cov,
            "repeat_ratio": repeat_ratio(cells, eps_rep),
            "per_structure": per_structure,
        }
    )


@main.command("agent-loop")
@click.option("--prompt", required=True)
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--mock", type=click.Path(exists=True), default=None,
              help="mock transcript JSONL; mutually exclusive with --live")
@click.option("--live", is_flag=True, default=False)
@click.option("--op", "operator", type=click.Choice(OPERATORS), default=None)
@click.option("--tau-ds", type=float, default=None)
@click.option("--tau-gs", type=float, default=None)
@click.option("--max-iters", type=int, default=None)
@click.option("--iters", type=int, default=None, help="evolution iterations per candidate")
@click.option("--seed", type=int, default=None)
@click.option("--trace-out", type=click.Path(), default=None)
@click.pass_context
@command_errors
def agent_loop(ctx, prompt, ckpt, data, mock, live, operator, tau_ds, tau_gs,
               max_iters, iters, seed, trace_out):
    """Run the Designer/Supervisor and Generator/Supervisor loops."""
    cfg = ctx.obj["cfg"]
    if bool(mock) == bool(live):
        raise AgentError("exactly one of --mock or --live is required")
    client = MockChatClient.from_jsonl(mock) if mock else HttpChatClient()
    model = load_checkpoint(ckpt)
    dataset = _load_dataset(data)
    loop = LoopConfig(
        tau_ds=float(_pick(tau_ds, cfg, "tau_ds", 0.7)),
        tau_gs=float(_pick(tau_gs, cfg, "tau_gs", 0.7)),
        max_iters=int(_pick(max_iters, cfg, "max_iters", 3)),
        seed=int(_pick(seed, cfg, "seed", 0)),
        operator=_pick(operator, cfg, "operator", "mix"),
    )
    evo = EvolutionConfig(iterations=int(_pick(iters, cfg, "iterations", 100)))
    result = run_design_loop(prompt, dataset, model, client, loop, evo)
    payload = {
        "score": result.score,
        "below_threshold": result.below_threshold,
        "lattice": lattice_to_dict(result.lattice) if result.lattice else None,
        "trace": result.trace,
    }
    if trace_out:
        Path(trace_out).write_text(json.dumps(result.trace, sort_keys=True))
    _emit(payload)


@main.command("export-tiled")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--reps", default="2,2,2", help="r1,r2,r3 repetitions")
@click.option("--out", type=click.Path(), default=None)
@command_errors
def export_tiled(input_path, reps, out):
    """Tile a lattice and export the Cartesian point-edge cloud."""
    try:
        r = tuple(int(x) for x in reps.split(","))
        if len(r) != 3:
            raise ValueError
    except ValueError:
        raise LatticeError(f"reps must be three comma-separated integers, got {reps!r}")
    cloud = tile(_load_structure(input_path), r)
    payload = {
        "points": [[float(v) for v in p] for p in cloud.points],
        "edges": [[i, j] for i, j in cloud.edges],
    }
    if out:
        Path(out).write_text(json.dumps(payload, sort_keys=True))
        _emit({"out": out, "points": len(cloud.points), "edges": len(cloud.edges)})
    else:
        _emit(payload)


if __name__ == "__main__":
    main()
