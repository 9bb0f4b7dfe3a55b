import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from latevo.gaussian import (
    MIX_EPS_STAB,
    DiagGaussian,
    GaussianError,
    LatentState,
    NegationInfeasibleError,
    intersect,
    kl_diag,
    mix,
    negate,
    sample,
    standard_normal,
    union_measure,
)
from latevo.transport import SinkhornConfig, node_cost, sinkhorn_log


def _g(mu, sigma):
    return DiagGaussian(np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(sigma, float)))


def _pdf(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


# --- DiagGaussian invariants ------------------------------------------------

def test_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(GaussianError):
        _g([0.0], [0.0])
    with pytest.raises(GaussianError):
        _g([0.0], [-1.0])


def test_gaussian_rejects_nonfinite():
    with pytest.raises(GaussianError):
        _g([np.nan], [1.0])


def test_standard_normal():
    g = standard_normal(3)
    assert np.all(g.mu == 0) and np.all(g.sigma == 1)


# --- KL ---------------------------------------------------------------------

def test_kl_identity_zero():
    g = _g([0.3, -1.2], [0.7, 2.0])
    assert kl_diag(g, g) == pytest.approx(0.0, abs=1e-14)


def test_kl_unit_shift():
    assert kl_diag(_g(0, 1), _g(1, 1)) == pytest.approx(0.5)


def test_kl_monte_carlo_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = _g(rng.normal(size=2), rng.uniform(0.3, 2.0, 2))
        b = _g(rng.normal(size=2), rng.uniform(0.3, 2.0, 2))
        x = a.mu + a.sigma * rng.standard_normal((10**5, 2))
        log_ratio = (
            np.log(a.sigma).sum() * -1 + np.log(b.sigma).sum()
            - 0.5 * (((x - a.mu) / a.sigma) ** 2).sum(-1)
            + 0.5 * (((x - b.mu) / b.sigma) ** 2).sum(-1)
        )
        est, se = log_ratio.mean(), log_ratio.std(ddof=1) / np.sqrt(len(log_ratio))
        assert abs(kl_diag(a, b) - est) < 3 * se + 1e-9


def test_kl_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = _g(rng.normal(size=3), rng.uniform(0.2, 3, 3))
        b = _g(rng.normal(size=3), rng.uniform(0.2, 3, 3))
        assert kl_diag(a, b) >= -1e-12


def test_kl_dim_mismatch():
    with pytest.raises(GaussianError):
        kl_diag(_g([0], [1]), _g([0, 0], [1, 1]))


# --- mix --------------------------------------------------------------------

def test_mix_endpoints():
    a, b = _g([1.0], [2.0]), _g([-3.0], [0.5])
    m0, m1 = mix(a, b, 0.0), mix(a, b, 1.0)
    assert m0.mu == pytest.approx(a.mu)
    assert m0.sigma == pytest.approx(a.sigma, abs=1e-6)
    assert m1.mu == pytest.approx(b.mu)
    assert m1.sigma == pytest.approx(b.sigma, abs=1e-6)


def test_mix_arithmetic_case():
    m = mix(_g(0, 1), _g(2, 3), 0.5)
    assert m.mu == pytest.approx([1.0])
    assert m.sigma == pytest.approx([2.0], abs=1e-6)


def test_mix_lambda_out_of_range():
    with pytest.raises(GaussianError):
        mix(_g(0, 1), _g(0, 1), 1.5)


def test_mix_mean_matches_true_mixture_and_variance_underestimates():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = _g(rng.normal(), rng.uniform(0.3, 2))
        b = _g(rng.normal() + 2.0, rng.uniform(0.3, 2))  # force mu_a != mu_b
        lam = float(rng.uniform(0.1, 0.9))
        m = mix(a, b, lam)
        true_mean = (1 - lam) * a.mu[0] + lam * b.mu[0]
        true_var = (
            (1 - lam) * (a.sigma[0] ** 2 + a.mu[0] ** 2)
            + lam * (b.sigma[0] ** 2 + b.mu[0] ** 2)
            - true_mean**2
        )
        assert m.mu[0] == pytest.approx(true_mean, abs=1e-12)
        assert m.sigma[0] ** 2 < true_var


def test_mix_symmetry_property():
    a, b = _g([0.4, -1], [1.2, 0.8]), _g([2, 2], [0.5, 2.5])
    m1, m2 = mix(a, b, 0.3), mix(b, a, 0.7)
    assert m1.mu == pytest.approx(m2.mu)
    assert m1.sigma == pytest.approx(m2.sigma)


# --- intersect --------------------------------------------------------------

def test_intersect_self_halves_variance():
    g = _g([0.7], [1.4])
    out = intersect(g, g)
    assert out.mu == pytest.approx(g.mu)
    assert out.sigma**2 == pytest.approx(g.sigma**2 / 2)


def test_intersect_closed_form():
    out = intersect(_g(0, 1), _g(2, 1))
    assert out.mu == pytest.approx([1.0])
    assert out.sigma**2 == pytest.approx([0.5])


def test_intersect_quadrature_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = _g(rng.normal(), rng.uniform(0.3, 2))
        b = _g(rng.normal(), rng.uniform(0.3, 2))
        out = intersect(a, b)
        prod = lambda x: _pdf(x, a.mu[0], a.sigma[0]) * _pdf(x, b.mu[0], b.sigma[0])
        z, _ = quad(prod, -30, 30)
        mean, _ = quad(lambda x: x * prod(x) / z, -30, 30)
        second, _ = quad(lambda x: x * x * prod(x) / z, -30, 30)
        assert out.mu[0] == pytest.approx(mean, abs=1e-6)
        assert out.sigma[0] ** 2 == pytest.approx(second - mean**2, abs=1e-6)


def test_intersect_commutative_precision_add():
    rng = np.random.default_rng(4)
    a = _g(rng.normal(size=3), rng.uniform(0.2, 2, 3))
    b = _g(rng.normal(size=3), rng.uniform(0.2, 2, 3))
    ab, ba = intersect(a, b), intersect(b, a)
    assert ab.mu == pytest.approx(ba.mu)
    assert 1 / ab.sigma**2 == pytest.approx(1 / a.sigma**2 + 1 / b.sigma**2)


# --- negate -----------------------------------------------------------------

def test_negate_beta_zero_limit():
    g = _g([0.9, -0.4], [0.8, 1.3])
    out = negate(g, _g([5, 5], [1, 1]), alpha=1.0, beta=1e-9)
    assert np.abs(out.mu - g.mu).max() < 1e-6
    assert np.abs(out.sigma - g.sigma).max() < 1e-6


def test_negate_arithmetic_case():
    out = negate(_g([0.5], [1.0]), _g([-1.0], [1.0]), alpha=2.0, beta=1.0)
    assert out.sigma == pytest.approx([1.0])
    assert out.mu == pytest.approx([2 * 0.5 - (-1.0)])


def test_negate_zero_precision_infeasible():
    with pytest.raises(NegationInfeasibleError) as exc:
        negate(_g([0, 0], [1, 1]), _g([1, 1], [1, 1]), alpha=1.0, beta=1.0)
    assert exc.value.coords == [0, 1]


def test_negate_names_violating_coords():
    a = _g([0, 0], [1.0, 0.5])
    b = _g([1, 1], [1.0, 2.0])
    with pytest.raises(NegationInfeasibleError) as exc:
        negate(a, b, alpha=1.0, beta=1.5)
    assert exc.value.coords == [0]  # coord 1 keeps positive precision


def test_negate_quadrature_recovery():
    # multiplying back p_b^beta recovers p_a^alpha moments on feasible cases
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = _g(rng.normal(), rng.uniform(0.3, 0.8))
        b = _g(rng.normal(), rng.uniform(1.5, 3.0))
        alpha, beta = 1.0, 0.5
        out = negate(a, b, alpha, beta)
        f = lambda x: _pdf(x, out.mu[0], out.sigma[0]) * _pdf(x, b.mu[0], b.sigma[0]) ** beta
        ref = lambda x: _pdf(x, a.mu[0], a.sigma[0]) ** alpha
        zf, _ = quad(f, -40, 40)
        zr, _ = quad(ref, -40, 40)
        mean_f, _ = quad(lambda x: x * f(x) / zf, -40, 40)
        mean_r, _ = quad(lambda x: x * ref(x) / zr, -40, 40)
        assert mean_f == pytest.approx(mean_r, abs=1e-5)


# --- sample -----------------------------------------------------------------

def test_sample_deterministic():
    g = _g([1.0, -2.0], [0.5, 3.0])
    assert np.array_equal(sample(g, 42), sample(g, 42))
    assert not np.array_equal(sample(g, 42), sample(g, 43))


def test_sample_sigma_limit():
    g = _g([4.2], [1e-300])
    assert sample(g, 0) == pytest.approx([4.2])


def test_sample_law_of_large_numbers():
    g = _g([2.0], [3.0])
    draws = np.array([sample(g, s)[0] for s in range(2000)])
    se = 3.0 / np.sqrt(len(draws))
    assert abs(draws.mean() - 2.0) < 3 * se + 0.05


# --- LatentState / union ----------------------------------------------------

def _state(rng, n, d=2):
    mk = lambda: _g(rng.normal(size=d), rng.uniform(0.3, 1.5, d))
    return LatentState(z_l=mk(), z_s=mk(), z_p=tuple(mk() for _ in range(n)),
                       z_e=tuple(mk() for _ in range(n)))


def _shifted_state(state, delta):
    shift = lambda g: _g(g.mu + delta, g.sigma)
    return LatentState(z_l=state.z_l, z_s=state.z_s,
                       z_p=tuple(shift(g) for g in state.z_p),
                       z_e=tuple(shift(g) for g in state.z_e))


def _plan_for(a, b, eps=0.05):
    def node_gs(s):
        return [
            _g(np.concatenate([p.mu, e.mu]), np.concatenate([p.sigma, e.sigma]))
            for p, e in zip(s.z_p, s.z_e)
        ]
    return sinkhorn_log(node_cost(node_gs(a), node_gs(b)),
                        SinkhornConfig(entropic_eps=eps, tol=1e-12, max_iters=20000))


def test_latent_state_requires_matching_node_channels():
    g = _g([0], [1])
    with pytest.raises(GaussianError):
        LatentState(z_l=g, z_s=g, z_p=(g,), z_e=(g, g))


def test_union_disjoint_appends_all():
    rng = np.random.default_rng(6)
    src = _state(rng, 3)
    scf = _shifted_state(_state(rng, 4), 100.0)  # far away: plan mass spreads but cost huge
    plan = _plan_for(src, scf, eps=0.05)
    tgt = union_measure(src, scf, plan, tau_o=0.1)
    # ρ ≈ 0 is unreachable with marginal-constrained plans; check the
    # bookkeeping instead: Z = N + M − Σ min(c_j, 1) and total mass = Z
    rho = np.minimum(plan.plan.sum(axis=0), 1.0).sum()
    assert tgt.normalizer == pytest.approx(3 + 4 - rho)
    assert tgt.total_mass() == pytest.approx(tgt.normalizer, abs=1e-6)


def test_union_identical_near_identity_plan():
    rng = np.random.default_rng(7)
    base = rng.normal(size=(4, 2)) * 5
    mk_state = lambda: LatentState(
        z_l=_g([0, 0], [1, 1]), z_s=_g([0, 0], [1, 1]),
        z_p=tuple(_g(base[i], [0.5, 0.5]) for i in range(4)),
        z_e=tuple(_g(base[i] * 0.1, [0.5, 0.5]) for i in range(4)),
    )
    src, scf = mk_state(), mk_state()
    plan = _plan_for(src, scf, eps=0.01)
    tgt = union_measure(src, scf, plan, tau_o=0.1)
    assert tgt.normalizer == pytest.approx(4.0, abs=1e-2)  # Z ≈ N_M
    assert tgt.appended == ()


def test_union_mass_sums_to_normalizer():
    rng = np.random.default_rng(8)
    src, scf = _state(rng, 3), _state(rng, 5)
    plan = _plan_for(src, scf)
    tgt = union_measure(src, scf, plan, tau_o=0.5)
    assert tgt.total_mass() == pytest.approx(tgt.normalizer, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31))
def test_mix_mean_linear_in_lambda(seed):
    rng = np.random.default_rng(seed)
    a = _g(rng.normal(size=2), rng.uniform(0.2, 2, 2))
    b = _g(rng.normal(size=2), rng.uniform(0.2, 2, 2))
    lam = float(rng.uniform(0, 1))
    assert mix(a, b, lam).mu == pytest.approx((1 - lam) * a.mu + lam * b.mu)
