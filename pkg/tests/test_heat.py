import numpy as np
import pytest
from scipy.linalg import expm

from degenkernel.davies import make_min_potential
from degenkernel.environments import EnvironmentSpec, generate
from degenkernel.errors import InvalidInputError, TruncationError
from degenkernel.graph import ConductanceField, LatticeGraph, dirichlet_form
from degenkernel.heat import (
    build_generator,
    chapman_kolmogorov_check,
    evolve,
    kernel_matrix,
    perturbed_kernel,
    perturbed_residual,
    required_radius,
    solve_kernel,
    truncation_check,
)

from conftest import unit_field


def dense_killed_generator(field, walk):
    """Generator built edge by edge, restricted to the interior (absorbing boundary)."""
    g = field.graph
    n = g.num_vertices
    A = np.zeros((n, n))
    for i, j, w in zip(g.minus, g.plus, field.omega):
        A[i, j] += w
        A[j, i] += w
    L = A - np.diag(A.sum(axis=1))
    if walk == "CSRW":
        L = L / A.sum(axis=1)[:, None]
    inner = np.nonzero(g.interior)[0]
    return inner, L[np.ix_(inner, inner)]


def taylor_kernel(Q, t, src, terms=40):
    v = np.zeros(len(Q))
    v[src] = 1.0
    out = v.copy()
    term = v.copy()
    for k in range(1, terms + 1):
        term = t * (Q.T @ term) / k
        out += term
    return out


def test_generator_basic_identities(pareto_field):
    g = pareto_field.graph
    for walk in ("CSRW", "VSRW"):
        gen = build_generator(pareto_field, walk)
        assert np.abs(gen.apply(np.ones(g.num_vertices))).max() == 0.0
        R = gen.rates.toarray()
        assert np.all(R >= 0)
        W = gen.weight[:, None] * R
        assert np.allclose(W, W.T, rtol=1e-14, atol=0)
    f = np.random.default_rng(1).normal(size=g.num_vertices)
    lc = build_generator(pareto_field, "CSRW").apply(f)
    lv = build_generator(pareto_field, "VSRW").apply(f)
    assert np.allclose(lv, pareto_field.mu * lc, rtol=1e-13, atol=1e-13)


def test_unit_field_speeds_differ_by_four(ball2):
    field = unit_field(ball2)
    f = np.random.default_rng(2).normal(size=ball2.num_vertices)
    lc = build_generator(field, "CSRW").apply(f)
    lv = build_generator(field, "VSRW").apply(f)
    inner = ball2.interior
    assert np.allclose(lc[inner], lv[inner] / 4, rtol=0, atol=1e-14)


def test_energy_pairing(pareto_field):
    rng = np.random.default_rng(3)
    f = rng.normal(size=pareto_field.graph.num_vertices)
    gen = build_generator(pareto_field, "CSRW")
    assert -np.sum(pareto_field.mu * f * gen.apply(f)) == pytest.approx(
        dirichlet_form(f, f, pareto_field), rel=1e-12)


def test_unknown_walk_rejected(ball2):
    with pytest.raises(InvalidInputError):
        build_generator(unit_field(ball2), "SRW")


def test_initial_condition(pareto_field):
    gen = build_generator(pareto_field)
    src = pareto_field.graph.index((1, 1))
    sol = solve_kernel(gen, (1, 1), [0.0, 0.3], on_leak="ignore")
    expect = np.zeros(pareto_field.graph.num_vertices)
    expect[src] = 1.0
    assert np.array_equal(sol.p[0], expect)
    assert sol.q[0, src] == 1.0 / pareto_field.mu[src]
    assert sol.leaked[0] == 0.0


def test_taylor_oracle_small_ball():
    g = LatticeGraph.ball(2, 2)
    field = unit_field(g)
    inner, Q = dense_killed_generator(field, "CSRW")
    src = int(np.searchsorted(inner, g.index((0, 0))))
    oracle = taylor_kernel(Q, 0.5, src)
    sol = solve_kernel(build_generator(field), (0, 0), [0.5], tol=1e-11, on_leak="ignore")
    assert np.abs(sol.p[0, inner] - oracle).max() <= 1e-9
    assert np.all(sol.p[0, g.boundary] == 0)
    assert abs(sol.mass[0] + sol.leaked[0] - 1) <= 1e-10


@pytest.mark.parametrize("walk", ["CSRW", "VSRW"])
def test_matches_dense_expm_on_random_field(walk):
    g = LatticeGraph.ball(2, 5)
    field = generate(EnvironmentSpec("iid_pareto", 21, alpha=1.5), g)
    inner, Q = dense_killed_generator(field, walk)
    src = g.index((1, -1))
    times = [0.1, 0.7, 2.0]
    sol = solve_kernel(build_generator(field, walk), src, times, tol=1e-10, on_leak="ignore")
    k = int(np.searchsorted(inner, src))
    for i, t in enumerate(times):
        oracle = expm(t * Q)[k]
        assert np.abs(sol.p[i, inner] - oracle).max() <= 1e-10
        assert abs(sol.mass[i] + sol.leaked[i] - 1) <= 1e-10
    assert np.all(np.diff(sol.leaked) >= 0)
    assert np.all(sol.p >= 0)


@pytest.mark.parametrize("walk", ["CSRW", "VSRW"])
def test_kernel_symmetry(walk):
    g = LatticeGraph.ball(2, 6)
    field = generate(EnvironmentSpec("iid_pareto", 4, alpha=2.0), g)
    gen = build_generator(field, walk)
    pts = [(0, 0), (2, 1), (-1, 3)]
    sols = {x: solve_kernel(gen, x, [1.5], tol=1e-10, on_leak="ignore") for x in pts}
    for x in pts:
        for y in pts:
            assert sols[y].q[0, g.index(x)] == pytest.approx(sols[x].q[0, g.index(y)], rel=1e-9, abs=1e-12)


def test_speed_rescaling_for_constant_field():
    # constant mu = m: VSRW at time t/m has the law of the CSRW at time t
    g = LatticeGraph.ball(2, 8)
    m = 4 * 2.5
    field = unit_field(g, 2.5)
    t = 1.3
    c = solve_kernel(build_generator(field, "CSRW"), (0, 0), [t], tol=1e-11, on_leak="ignore")
    v = solve_kernel(build_generator(field, "VSRW"), (0, 0), [t / m], tol=1e-11, on_leak="ignore")
    inner = g.interior
    assert np.allclose(c.q[0, inner] * m, v.p[0, inner], rtol=0, atol=1e-12)


def test_leak_raises_with_required_radius():
    g = LatticeGraph.ball(2, 4)
    gen = build_generator(unit_field(g))
    with pytest.raises(TruncationError) as err:
        solve_kernel(gen, (0, 0), [10.0])
    assert err.value.required_radius > 4
    sol = solve_kernel(gen, (0, 0), [10.0], on_leak="ignore")
    assert sol.leaked[0] > 1e-8


def test_required_radius_is_sufficient():
    t, tol = 2.0, 1e-8
    field = unit_field(LatticeGraph.ball(2, 3))
    r = required_radius(build_generator(field), t, tol)
    big = unit_field(LatticeGraph.ball(2, r))
    sol = solve_kernel(build_generator(big), (0, 0), [t], tol)
    assert sol.leaked[0] <= tol


def test_solver_input_validation(ball2):
    gen = build_generator(unit_field(ball2))
    with pytest.raises(InvalidInputError):
        solve_kernel(gen, (0, 0), [1.0], tol=1e-3)
    with pytest.raises(InvalidInputError):
        solve_kernel(gen, (6, 0), [1.0])
    with pytest.raises(InvalidInputError):
        solve_kernel(gen, (0, 0), [-1.0])


def test_chapman_kolmogorov():
    g = LatticeGraph.ball(2, 3)
    gen = build_generator(unit_field(g))
    assert chapman_kolmogorov_check(gen, 0.25, 0.0) <= 1e-15
    assert chapman_kolmogorov_check(gen, 0.25, 0.25) <= 1e-8
    pg = LatticeGraph.ball(2, 3)
    pareto = generate(EnvironmentSpec("iid_pareto", 5, alpha=1.5), pg)
    assert chapman_kolmogorov_check(build_generator(pareto), 0.25, 0.25) <= 1e-7


def test_kernel_matrix_agrees_with_dense_oracle(pareto_field):
    inner, Q = dense_killed_generator(pareto_field, "CSRW")
    got_inner, M = kernel_matrix(build_generator(pareto_field), 0.8)
    assert np.array_equal(inner, got_inner)
    assert np.abs(M - expm(0.8 * Q)).max() <= 1e-12


def test_evolve_matches_kernel_matrix(pareto_field):
    gen = build_generator(pareto_field)
    f = np.random.default_rng(8).random(pareto_field.graph.num_vertices)
    inner, M = kernel_matrix(gen, 0.6)
    u = evolve(gen, f, [0.6])[0]
    assert np.allclose(u[inner], M @ f[inner], rtol=0, atol=1e-11)


def test_truncation_check():
    spec = EnvironmentSpec("uniform_elliptic")
    assert truncation_check(spec, 2, (0, 0), 1e-3, 8).ok
    bad = truncation_check(spec, 2, (0, 0), 64.0, 8)
    assert not bad.ok and bad.discrepancy > 1e-8
    discs = [truncation_check(spec, 2, (0, 0), 4.0, r, tol=1e-10).discrepancy for r in (4, 8, 16)]
    assert discs[0] >= discs[1] >= discs[2]


def test_perturbed_identity_and_residual():
    g = LatticeGraph.ball(2, 10)
    field = unit_field(g)
    gen = build_generator(field)
    sol = solve_kernel(gen, (0, 0), [0.5, 1.0], on_leak="ignore")
    same = perturbed_kernel(sol, np.zeros(g.num_vertices))
    assert np.array_equal(same.q, sol.q)
    pot = make_min_potential(field, (0, 0), (4, 0), 0.5)
    assert perturbed_residual(gen, (0, 0), pot, [0.5, 1.0, 2.0]) <= 1e-5


def test_perturbed_kernel_adjoint_pair():
    g = LatticeGraph.ball(2, 6)
    field = generate(EnvironmentSpec("iid_pareto", 2, alpha=2.0), g)
    gen = build_generator(field)
    psi = make_min_potential(field, (0, 0), (3, 1), 0.7).psi
    pts = [(0, 0), (1, 2), (-2, 0), (3, 1)]
    plus = {y: perturbed_kernel(solve_kernel(gen, y, [1.0], tol=1e-11, on_leak="ignore"), psi) for y in pts}
    minus = {y: perturbed_kernel(solve_kernel(gen, y, [1.0], tol=1e-11, on_leak="ignore"), -psi) for y in pts}
    for x in pts:
        for y in pts:
            assert plus[y].q[0, g.index(x)] == pytest.approx(minus[x].q[0, g.index(y)], rel=1e-9)


def test_psi_cap_enforced(ball2):
    field = unit_field(ball2)
    sol = solve_kernel(build_generator(field), (0, 0), [0.1])
    with pytest.raises(InvalidInputError):
        perturbed_kernel(sol, np.full(ball2.num_vertices, 41.0))


def test_conductance_field_rejects_nonpositive(ball2):
    with pytest.raises(InvalidInputError):
        ConductanceField(ball2, -np.ones(ball2.num_edges))
