import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wentzell import Rho, angular_profile, assemble_operators, build_disk_mesh, stationary_measure
from wentzell.dynamics import solve_heat
from wentzell.otto import (
    GradientUndefined,
    Potential,
    SingularWeightError,
    TangentPerturbation,
    action,
    ede_decomposition,
    entropy,
    fokker_planck_rhs,
    forward_image,
    grad_entropy,
    hamiltonian,
    identify_potential,
    lagrangian,
    pairing,
    perturbation_norm,
    potential_mismatch,
    potential_norm,
)


def _random_rho(mesh, rng, lo=0.3):
    f = lo + rng.random(mesh.node_count)
    f /= mesh.mu_weights @ f
    return Rho.from_density(mesh, f)


def _random_tangent(mesh, rng):
    w = rng.normal(size=mesh.node_count)
    w -= mesh.weights * w.sum() / mesh.weights.sum()
    return TangentPerturbation.from_weighted(mesh, w)


def test_entropy_of_mu_is_zero(mesh):
    assert entropy(stationary_measure(mesh)) == pytest.approx(0.0, abs=1e-15)
    assert entropy(angular_profile(mesh)) > 0


def test_potential_roundtrip(small_mesh, rng):
    rho = _random_rho(small_mesh, rng)
    ops = assemble_operators(small_mesh, 2.0)
    phi = Potential.normalized(small_mesh, rng.normal(size=small_mesh.node_count))
    s = forward_image(rho, phi, ops)
    back = identify_potential(rho, s, ops)
    assert np.allclose(back.phi, phi.phi, atol=1e-9)


def test_norm_duality(small_mesh, rng):
    rho = _random_rho(small_mesh, rng)
    s = _random_tangent(small_mesh, rng)
    phi = identify_potential(rho, s, 1.0)
    n2 = perturbation_norm(rho, s, 1.0)
    assert n2 == pytest.approx(pairing(small_mesh, s, phi), rel=1e-9)
    assert n2 == pytest.approx(potential_norm(rho, phi, 1.0), rel=1e-9)


def test_zero_tangent(small_mesh, rng):
    rho = _random_rho(small_mesh, rng)
    zero = TangentPerturbation.from_vector(small_mesh, np.zeros(small_mesh.node_count))
    assert perturbation_norm(rho, zero, 1.0) == 0.0


def test_errors(small_mesh, rng):
    rho = _random_rho(small_mesh, rng)
    bad = TangentPerturbation.from_weighted(small_mesh, np.ones(small_mesh.node_count))
    with pytest.raises(ValueError):
        identify_potential(rho, bad, 1.0)
    f = np.ones(small_mesh.node_count)
    f[3] = 0.0
    f /= small_mesh.mu_weights @ f
    with pytest.raises(SingularWeightError):
        identify_potential(Rho.from_density(small_mesh, f), _random_tangent(small_mesh, rng), 1.0)
    # trace jump: gradient is undefined
    g = np.ones(small_mesh.node_count)
    g[small_mesh.boundary] = 2.0
    g /= small_mesh.mu_weights @ g
    jump = Rho.from_density(small_mesh, g)
    ops = assemble_operators(small_mesh, 1.0)
    with pytest.raises(GradientUndefined):
        grad_entropy(ops, jump)
    assert lagrangian(ops, jump, _random_tangent(small_mesh, rng)) == np.inf


def test_hamiltonian_basic(small_mesh, rng):
    ops = assemble_operators(small_mesh, 0.5)
    rho = _random_rho(small_mesh, rng)
    assert hamiltonian(ops, rho, np.zeros(small_mesh.node_count)) == 0.0
    assert hamiltonian(ops, rho, np.full(small_mesh.node_count, 3.0)) == pytest.approx(0.0, abs=1e-12)
    # at mu the drift vanishes and H is the squared norm
    mu = stationary_measure(small_mesh)
    xi = rng.normal(size=small_mesh.node_count)
    assert hamiltonian(ops, mu, xi) == pytest.approx(potential_norm(mu, xi, ops), rel=1e-10)


def test_lagrangian_vanishes_on_fokker_planck(small_mesh, rng):
    ops = assemble_operators(small_mesh, 4.0)
    rho = angular_profile(small_mesh)
    assert lagrangian(ops, rho, fokker_planck_rhs(ops, rho)) == pytest.approx(0.0, abs=1e-14)
    s = _random_tangent(small_mesh, rng)
    assert lagrangian(ops, rho, s) > 0


@pytest.mark.parametrize("a", [0.5, 1.0, 4.0])
def test_grad_entropy_potential_is_log_density(ops_by_a, mesh, a):
    ops = ops_by_a[a]
    tr = solve_heat(ops, angular_profile(mesh), 2e-3, 1e-4, stride=10)
    rho = tr.states[-1]
    g = grad_entropy(ops, rho, verify=True)
    assert potential_mismatch(ops, rho, g) < 5e-3


def test_reversed_heat_flow_action_equals_entropy_drop(ops_by_a, mesh):
    ops = ops_by_a[1.0]
    tr = solve_heat(ops, angular_profile(mesh), 5e-3, 1e-4)
    fwd = action(ops, tr)
    back = action(ops, tr.reversed())
    drop = tr.entropies[0] - tr.entropies[-1]
    assert fwd < 1e-3 * drop
    assert back == pytest.approx(drop, rel=0.01)


def test_ede_on_short_run(ops_by_a, mesh):
    ops = ops_by_a[4.0]
    rec = ede_decomposition(ops, solve_heat(ops, angular_profile(mesh), 5e-3, 1e-4))
    assert rec.relative_residual < 1e-3
    assert rec.psi_integral == pytest.approx(-0.5 * rec.ent_drop, rel=0.02)
    lines = rec.to_csv("x").splitlines()
    assert lines[1] == "t,entropy,psi,psi_star,lagrangian" and len(lines) == 2 + 51


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(0.1, 10.0))
def test_norm_properties_random(seed, a):
    m = build_disk_mesh(2, 6)
    rng = np.random.default_rng(seed)
    rho = _random_rho(m, rng)
    s1, s2 = _random_tangent(m, rng), _random_tangent(m, rng)
    n1, n2 = perturbation_norm(rho, s1, a), perturbation_norm(rho, s2, a)
    n12 = perturbation_norm(rho, s1 + s2, a)
    assert n1 > 0 and n2 > 0
    assert np.sqrt(n12) <= np.sqrt(n1) + np.sqrt(n2) + 1e-9
    assert perturbation_norm(rho, 2.0 * s1, a) == pytest.approx(4 * n1, rel=1e-8)
