import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wentzell import Rho, angular_profile, assemble_operators, build_disk_mesh, stationary_measure
from wentzell.dynamics import heat_step
from wentzell.metric import cost_matrix
from wentzell.rho import total_variation
from wentzell.transport import (
    JkoConfig,
    TransportError,
    aggregate,
    aggregation_matrix,
    epsilon_schedule,
    exact_ot_small,
    jko_flow,
    jko_step,
    jko_step_detailed,
    jko_step_reference,
    sinkhorn,
)


@pytest.fixture(scope="module")
def coarse_cost():
    m = build_disk_mesh(6, 16)
    return m, cost_matrix(1.0, m, 64, use_graph=False)


def _random_instance(rng, n):
    X = rng.uniform(-0.7, 0.7, (n, 2))
    C = np.sum((X[:, None] - X[None]) ** 2, axis=2)
    a, b = rng.random(n), rng.random(n)
    return a / a.sum(), b / b.sum(), C


def test_epsilon_schedule():
    C = np.array([[0, 1.0], [1.0, 0]])
    s = epsilon_schedule(C, 1e-3)
    assert s[0] == 1.0 and s[-1] == pytest.approx(1e-3) and np.all(np.diff(s) < 0)


def test_sinkhorn_diracs():
    C = np.array([[0.0, 0.3, 0.8], [0.3, 0.0, 0.5], [0.8, 0.5, 0.0]])
    same = sinkhorn([0, 1, 0], [0, 1, 0], C, 1e-4)
    assert same.cost_value == 0.0
    r = sinkhorn([1, 0, 0], [0, 0, 1], C, 1e-4)
    assert r.cost_value == pytest.approx(0.8, rel=0.01)
    assert np.all(r.plan >= 0)


def test_sinkhorn_vs_exact(rng):
    for n in (5, 12, 20):
        a, b, C = _random_instance(rng, n)
        eps = 1e-3 * np.median(C[C > 0])
        r = sinkhorn(a, b, C, eps, tol=1e-6)
        assert r.cost_value == pytest.approx(exact_ot_small(a, b, C), rel=0.01)
        assert 0.5 * np.abs(r.plan.sum(1) - a).sum() <= 1e-6
        assert 0.5 * np.abs(r.plan.sum(0) - b).sum() <= 1e-6


def test_sinkhorn_errors(rng):
    a, b, C = _random_instance(rng, 4)
    with pytest.raises(ValueError):
        sinkhorn(a, 2 * b, C, 1e-2)
    with pytest.raises(ValueError):
        sinkhorn(-a, -b, C, 1e-2)
    with pytest.raises(ValueError):
        sinkhorn(a, b, C[:3], 1e-2)
    with pytest.raises(TransportError, match="marginal violation"):
        sinkhorn(a, b, C, 1e-6, max_iter=3, tol=1e-14)


def test_exact_ot_small():
    assert exact_ot_small([1, 0], [1, 0], [[0, 1], [1, 0]]) == 0.0
    assert exact_ot_small([1, 0], [0, 1], [[0, 1], [1, 0]]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        exact_ot_small(np.ones(65) / 65, np.ones(65) / 65, np.zeros((65, 65)))


def test_aggregation_conserves():
    fine, coarse = build_disk_mesh(16, 48), build_disk_mesh(6, 16)
    T = aggregation_matrix(fine, coarse)
    assert np.allclose(T.sum(axis=1), 1.0, atol=1e-13)
    mu = aggregate(stationary_measure(fine), coarse)
    assert np.allclose(mu.density, 1.0, atol=1e-12)
    rho = angular_profile(fine)
    agg = aggregate(rho, coarse)
    assert agg.mass == pytest.approx(1.0, abs=1e-12)
    assert agg.boundary_mass == pytest.approx(rho.boundary_mass, abs=1e-13)


def test_jko_config_validation(coarse_cost):
    _, C = coarse_cost
    with pytest.raises(ValueError):
        JkoConfig(h=0.0, epsilon=1e-3, cost=C)
    with pytest.raises(ValueError):
        JkoConfig(h=1e-3, epsilon=-1.0, cost=C)


def test_jko_fixed_point(coarse_cost):
    m, C = coarse_cost
    cfg = JkoConfig(h=1e-3, epsilon=1e-3 * C.median(), cost=C)
    mu = stationary_measure(m)
    assert total_variation(jko_step(mu, cfg).masses, mu.masses) < 1e-12


def test_jko_descent_and_heat_consistency(coarse_cost):
    m, C = coarse_cost
    cfg = JkoConfig(h=1e-3, epsilon=1e-3 * C.median(), cost=C)
    rho0 = angular_profile(m)
    res = jko_step_detailed(rho0, cfg)
    assert res.objective <= res.objective_prev + cfg.tol
    assert res.rho.mass == pytest.approx(1.0, abs=1e-12)
    heat = heat_step(assemble_operators(m, 1.0), rho0, 1e-3)
    assert total_variation(res.rho.masses, heat.masses) <= 0.03


@pytest.mark.parametrize("h", [0.05, 0.2, 1.0])
def test_jko_matches_direct_minimization(tiny_mesh, h):
    C = cost_matrix(1.0, tiny_mesh, 32, use_graph=False)
    p = np.random.default_rng(7).random(8)
    p /= p.sum()
    rho = Rho.from_masses(tiny_mesh, p)
    res = jko_step_detailed(rho, JkoConfig(h=h, epsilon=1e-3 * C.median(), cost=C, max_iter=50000))
    q, obj = jko_step_reference(p, C.C, tiny_mesh.mu_weights, h)
    assert not res.stayed
    assert res.objective == pytest.approx(obj, rel=1e-3)
    assert total_variation(res.rho.masses, q) < 2e-3


def test_jko_flow(coarse_cost):
    m, C = coarse_cost
    cfg = JkoConfig(h=4e-3, epsilon=1e-3 * C.median(), cost=C)
    tr = jko_flow(angular_profile(m), cfg, 0.02)
    assert len(tr.states) == 6
    assert np.all(np.diff(tr.objectives) <= 1e-12)
    assert np.all(np.diff(tr.entropies) <= 1e-12)
    lines = tr.to_csv("h").splitlines()
    assert lines[1] == "n,t,entropy,transport_cost,objective,boundary_mass"
    assert tr.state_at(0.0) is tr.states[0]
    assert tr.state_at(0.005) is tr.states[2]
    flat = jko_flow(stationary_measure(m), cfg, 0.008)
    assert all(total_variation(s.masses, flat.states[0].masses) < 1e-12 for s in flat.states)
    with pytest.raises(ValueError):
        jko_flow(angular_profile(m), cfg, 1e-3)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 10))
def test_sinkhorn_upper_bounds_exact(seed, n):
    a, b, C = _random_instance(np.random.default_rng(seed), n)
    r = sinkhorn(a, b, C, 1e-2 * np.median(C[C > 0]), tol=1e-7)
    e = exact_ot_small(a, b, C)
    assert r.cost_value >= e - 1e-6
    assert np.all(r.plan >= 0)


def test_newton_polish_restores_marginals_after_short_sinkhorn():
    from wentzell.transport import _newton_polish

    rng = np.random.default_rng(3)
    X = rng.uniform(-0.8, 0.8, (12, 2))
    C = np.sum((X[:, None] - X[None]) ** 2, axis=2)
    a, b = rng.random(12), rng.random(12)
    a, b = a / a.sum(), b / b.sum()
    eps = 1e-2 * np.median(C[C > 0])
    f, g, err = _newton_polish(np.log(a), np.log(b), C, np.zeros(12), eps, 1e-10)
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    assert err <= 1e-10
    assert np.allclose(P.sum(axis=1), a, atol=1e-12)
    assert np.allclose(P.sum(axis=0), b, atol=1e-9)
