import numpy as np
import pytest
import torch

from latevo.lattice import FAMILIES, Lattice, UnitCell, synth_family
from latevo.model import (
    DisentangledVAE,
    ModelConfig,
    ModelError,
    load_checkpoint,
    predict_properties,
    save_checkpoint,
    train_model,
    train_predictor,
)


def _permuted(lat: Lattice, perm: np.ndarray) -> Lattice:
    inv = np.argsort(perm)
    cell = UnitCell(
        nodes=np.asarray(lat.cell.nodes)[perm],
        edges=tuple((int(inv[i]), int(inv[j])) for i, j in lat.cell.edges),
    )
    return Lattice(vectors=lat.vectors, cell=cell, properties=lat.properties)


def test_encode_deterministic(tiny_model, dataset8):
    a = tiny_model.encode(dataset8[0])
    b = tiny_model.encode(dataset8[0])
    assert np.array_equal(a.z_s.mu, b.z_s.mu)
    assert all(np.array_equal(x.mu, y.mu) for x, y in zip(a.z_p, b.z_p))


def test_encode_permutation_equivariance(tiny_model, dataset8):
    lat = dataset8[1]
    rng = np.random.default_rng(0)
    perm = rng.permutation(lat.cell.n_nodes)
    a = tiny_model.encode(lat)
    b = tiny_model.encode(_permuted(lat, perm))
    assert np.abs(a.z_l.mu - b.z_l.mu).max() < 1e-6
    assert np.abs(a.z_s.mu - b.z_s.mu).max() < 1e-6
    for i, pi in enumerate(perm):
        assert np.abs(np.asarray(a.z_p[pi].mu) - np.asarray(b.z_p[i].mu)).max() < 1e-6
        assert np.abs(np.asarray(a.z_e[pi].mu) - np.asarray(b.z_e[i].mu)).max() < 1e-6


def test_encode_single_node(tiny_model):
    lat = Lattice(vectors=np.eye(3), cell=UnitCell(nodes=np.array([[0.5, 0.5, 0.5]]), edges=()))
    state = tiny_model.encode(lat)
    assert state.node_count == 1


def test_decode_preserves_node_count(tiny_model, dataset8):
    for lat in dataset8[:4]:
        out, _ = tiny_model.decode(tiny_model.encode(lat), seed=0)
        assert out.cell.n_nodes == lat.cell.n_nodes


def test_decode_zero_sigma_seed_independent(tiny_model, dataset8):
    state = tiny_model.encode(dataset8[0])
    from latevo.gaussian import DiagGaussian, LatentState
    tiny = 1e-300
    squeeze = lambda g: DiagGaussian(g.mu, np.full_like(g.sigma, tiny))
    det = LatentState(
        z_l=squeeze(state.z_l), z_s=squeeze(state.z_s),
        z_p=tuple(squeeze(g) for g in state.z_p),
        z_e=tuple(squeeze(g) for g in state.z_e),
    )
    a, ya = tiny_model.decode(det, seed=1)
    b, yb = tiny_model.decode(det, seed=999)
    assert np.array_equal(a.cell.nodes, b.cell.nodes)
    assert a.cell.edges == b.cell.edges
    assert np.array_equal(ya, yb)


def test_elbo_parts_sum(tiny_model, dataset8):
    parts = tiny_model.elbo(dataset8[0], seed=3)
    total = sum(float(v.detach()) for k, v in parts.items() if k != "total")
    assert float(parts["total"].detach()) == pytest.approx(total, abs=1e-9)


def test_elbo_kl_nonnegative(tiny_model, dataset8):
    for lat in dataset8:
        parts = tiny_model.elbo(lat, seed=0)
        for key in ("kl_l", "kl_p", "kl_e", "kl_s"):
            assert float(parts[key].detach()) >= -1e-12


def test_elbo_kl_zero_at_prior(dataset8):
    model = DisentangledVAE(ModelConfig())
    # force the heads to emit exactly the standard-normal posterior
    with torch.no_grad():
        for head in (model.head_p, model.head_e, model.head_l, model.head_s):
            head.weight.zero_()
            head.bias.zero_()
    parts = model.elbo(dataset8[0], seed=0)
    for key in ("kl_l", "kl_p", "kl_e", "kl_s"):
        assert float(parts[key].detach()) == pytest.approx(0.0, abs=1e-12)


def test_train_empty_dataset():
    with pytest.raises(ModelError):
        train_model([], ModelConfig(epochs=1))


def test_train_loss_decreases(dataset8):
    rep = train_model(dataset8, ModelConfig(epochs=30, seed=1))
    assert rep.history[rep.best_epoch]["total"] <= rep.history[0]["total"]
    assert rep.history[-1]["total"] < rep.history[0]["total"]


def test_train_deterministic(dataset8):
    cfg = ModelConfig(epochs=8, seed=5)
    a = train_model(dataset8, cfg)
    b = train_model(dataset8, cfg)
    assert a.history == b.history
    assert a.best_epoch == b.best_epoch
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_elbo_gradients_match_finite_differences(dataset8):
    model = DisentangledVAE(ModelConfig(d_l=2, d_p=2, d_e=2, d_s=2, hidden=4, rounds=1))
    lat = dataset8[0]
    parts = model.elbo(lat, seed=7)
    parts["total"].backward()
    h = 1e-6
    checked = 0
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        flat = p.detach().view(-1)
        g = p.grad.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 3)):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
            up = float(model.elbo(lat, seed=7)["total"].detach())
            with torch.no_grad():
                flat[idx] = orig - h
            dn = float(model.elbo(lat, seed=7)["total"].detach())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(g[idx].item()), 1e-6)
            assert abs(fd - g[idx].item()) / denom < 1e-4, name
            checked += 1
    assert checked > 20


def test_normalization_round_trip(tiny_model):
    y = torch.tensor([0.3, 0.7, -0.2], dtype=torch.float64)
    back = tiny_model.denormalize_y(tiny_model.normalize_y(y))
    assert torch.allclose(back, y, atol=1e-12)


def test_predictor_constant_labels(dataset8, tiny_model):
    import copy
    model = copy.deepcopy(tiny_model)
    const = np.array([0.4, 0.2, 0.1])
    flat = [
        Lattice(vectors=l.vectors, cell=l.cell, properties=const, name=l.name)
        for l in dataset8
    ]
    # widen stats so normalize() is well-defined around the constant
    model.set_norm_stats(const - 1.0, const + 1.0)
    train_predictor(flat, model, epochs=2000, lr=1e-2, patience=2000, seed=0)
    preds = np.stack([predict_properties(l, model) for l in flat])
    assert np.abs(preds - const).max() < 1e-3


def test_predictor_backbone_frozen(dataset8, tiny_model):
    import copy
    model = copy.deepcopy(tiny_model)
    before = {
        k: v.clone() for k, v in model.state_dict().items() if not k.startswith("head_y")
    }
    train_predictor(dataset8, model, epochs=20, seed=0)
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_predictor_deterministic(dataset8, tiny_model):
    import copy
    m1, m2 = copy.deepcopy(tiny_model), copy.deepcopy(tiny_model)
    r1 = train_predictor(dataset8, m1, epochs=15, seed=3)
    r2 = train_predictor(dataset8, m2, epochs=15, seed=3)
    assert r1["val_curve"] == r2["val_curve"]
    assert np.array_equal(
        predict_properties(dataset8[0], m1), predict_properties(dataset8[0], m2)
    )


def test_checkpoint_round_trip(tmp_path, tiny_model, dataset8):
    path = tmp_path / "model.json"
    save_checkpoint(tiny_model, str(path))
    loaded = load_checkpoint(str(path))
    sa, sb = tiny_model.state_dict(), loaded.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert np.array_equal(
        predict_properties(dataset8[0], tiny_model), predict_properties(dataset8[0], loaded)
    )


def test_checkpoint_bad_version(tmp_path, tiny_model):
    import json
    path = tmp_path / "model.json"
    save_checkpoint(tiny_model, str(path))
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelError):
        load_checkpoint(str(path))
