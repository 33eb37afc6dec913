import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degenkernel.errors import InvalidInputError
from degenkernel.graph import (
    ConductanceField,
    LatticeGraph,
    averaged_norm,
    dirichlet_form,
    divergence,
    edge_average,
    gradient,
    read_field,
    write_field,
)
from degenkernel.heat import build_generator

from conftest import unit_field


def _edge_list(g):
    """Independent enumeration of nearest-neighbour pairs, larger endpoint first."""
    pts = {tuple(c): i for i, c in enumerate(g.coords)}
    pairs = []
    for p, i in pts.items():
        for axis in range(g.d):
            q = list(p)
            q[axis] += 1
            j = pts.get(tuple(q))
            if j is not None:
                pairs.append((j, i))
    return pairs


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64])
def test_ball_size_closed_form(n):
    assert LatticeGraph.ball(2, n).num_vertices == 2 * n * n + 2 * n + 1


def test_ball_structure():
    g = LatticeGraph.ball(3, 4, (1, -2, 5))
    assert g.is_connected
    assert np.all(np.abs(g.coords[g.plus] - g.coords[g.minus]).sum(axis=1) == 1)
    # e+ is the lexicographically larger endpoint
    assert all(tuple(a) > tuple(b) for a, b in zip(g.coords[g.plus], g.coords[g.minus]))
    assert np.array_equal(g.boundary, g.degree < 2 * g.d)
    assert np.array_equal(g.boundary, np.abs(g.coords - (1, -2, 5)).sum(axis=1) == 4)
    assert sorted(zip(g.plus.tolist(), g.minus.tolist())) == sorted(_edge_list(g))


def test_index_roundtrip_and_missing_point():
    g = LatticeGraph.ball(2, 3)
    assert np.array_equal(g.index_of(g.coords), np.arange(g.num_vertices))
    assert g.index_of([[4, 0], [10, 10]]).tolist() == [-1, -1]
    with pytest.raises(InvalidInputError):
        g.index((3, 1))


def test_field_accessor_symmetric_and_positive(pareto_field):
    f = pareto_field
    assert f((0, 0), (1, 0)) == f((1, 0), (0, 0)) > 0
    assert f((0, 0), (2, 0)) == 0.0
    with pytest.raises(InvalidInputError):
        ConductanceField(f.graph, np.zeros(f.graph.num_edges))
    with pytest.raises(InvalidInputError):
        ConductanceField(f.graph, np.ones(3))


def test_vertex_measures_bounds(pareto_field):
    f = pareto_field
    w = f.neighbor_weights()
    assert np.all(f.mu >= w.max(axis=1))
    inv = np.where(w > 0, 1 / np.where(w > 0, w, 1), 0)
    assert np.all(f.nu >= inv.max(axis=1))
    assert np.all(f.mu > 0) and np.all(f.nu > 0)
    assert np.allclose(f.mu, w.sum(axis=1))


def test_gradient_of_constant_and_coordinate(ball2):
    assert np.all(gradient(np.full(ball2.num_vertices, 7.0), ball2) == 0)
    grad = gradient(ball2.coords[:, 0].astype(float), ball2)
    assert np.all(grad[ball2.axis == 0] == 1) and np.all(grad[ball2.axis == 1] == 0)


def test_domain_mismatch_raises(ball2):
    with pytest.raises(InvalidInputError):
        gradient(np.zeros(3), ball2)
    with pytest.raises(InvalidInputError):
        divergence(np.zeros(ball2.num_vertices), ball2)


def test_divergence_zero_and_point_mass():
    g = LatticeGraph.ball(2, 1)
    assert np.all(divergence(np.zeros(g.num_edges), g) == 0)
    f = np.zeros(g.num_vertices)
    c = g.index((0, 0))
    f[c] = 1.0
    # hand count on the 5-point ball: the centre has 4 incident edges
    div = divergence(gradient(f, g), g)
    assert div[c] == 4.0 == g.degree[c] * f[c]
    assert np.all(div[np.arange(g.num_vertices) != c] == -1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 7), d=st.integers(2, 3))
def test_adjointness(seed, n, d):
    g = LatticeGraph.ball(d, n)
    rng = np.random.default_rng(seed)
    f = rng.normal(size=g.num_vertices)
    F = rng.normal(size=g.num_edges)
    lhs = sum(F[e] * (f[i] - f[j]) for e, (i, j) in enumerate(zip(g.plus, g.minus)))
    rhs = float(f @ divergence(F, g))
    scale = np.abs(F).sum() * np.abs(f).max()
    assert abs(lhs - rhs) <= 1e-12 * scale
    assert abs(float(gradient(f, g) @ F) - rhs) <= 1e-12 * scale


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_product_rule_edgewise(seed):
    g = LatticeGraph.ball(2, 5)
    rng = np.random.default_rng(seed)
    f, h = rng.normal(size=(2, g.num_vertices))
    lhs = gradient(f * h, g)
    rhs = edge_average(f, g) * gradient(h, g) + edge_average(h, g) * gradient(f, g)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(f).max() * np.abs(h).max()))


def test_edge_average_properties(ball2, rng):
    assert np.all(edge_average(np.full(ball2.num_vertices, 2.5), ball2) == 2.5)
    f = rng.exponential(size=ball2.num_vertices)
    assert np.all(edge_average(f, ball2) ** 2 <= edge_average(f**2, ball2) + 1e-15)


def test_dirichlet_form_point_mass_and_constant(ball2):
    field = unit_field(ball2)
    f = np.zeros(ball2.num_vertices)
    f[ball2.index((0, 0))] = 1.0
    assert dirichlet_form(f, f, field) == 4.0
    assert dirichlet_form(np.ones_like(f), np.ones_like(f), field) == 0.0


def test_dirichlet_form_matches_generator(pareto_field, rng):
    g = pareto_field.graph
    f = rng.normal(size=g.num_vertices)
    f[g.boundary] = 0.0
    gen = build_generator(pareto_field, "CSRW")
    pairing = -float(np.sum(pareto_field.mu * f * gen.apply(f)))
    assert dirichlet_form(f, f, pareto_field) == pytest.approx(pairing, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dirichlet_form_symmetric_nonnegative(seed):
    g = LatticeGraph.ball(2, 4)
    rng = np.random.default_rng(seed)
    field = ConductanceField(g, rng.pareto(2.0, g.num_edges) + 0.01)
    f, h, eta = rng.normal(size=(3, g.num_vertices))
    assert dirichlet_form(f, h, field) == pytest.approx(dirichlet_form(h, f, field), rel=1e-12, abs=1e-12)
    assert dirichlet_form(f, f, field, weight=eta) >= 0
    weighted = float(np.sum(field.omega * edge_average(eta**2, g) * gradient(f, g) ** 2))
    assert dirichlet_form(f, f, field, weight=eta) == pytest.approx(weighted, rel=1e-12)


def test_dirichlet_form_vanishes_only_on_constants(ball2, rng):
    field = unit_field(ball2)
    f = np.ones(ball2.num_vertices)
    f[5] += 1e-3
    assert dirichlet_form(f, f, field) > 0


def test_averaged_norm(rng):
    assert averaged_norm(np.full(9, -3.0), 2.5) == pytest.approx(3.0)
    f = rng.normal(size=40)
    assert averaged_norm(f, np.inf) == np.abs(f).max()
    norms = [averaged_norm(f, p) for p in (1, 2, 4)]
    assert norms[0] <= norms[1] <= norms[2]
    w = rng.exponential(size=40)
    assert averaged_norm(f, 2, weight=w) == pytest.approx(np.sqrt(np.mean(w * f**2)))
    assert averaged_norm(f, 1, B=np.arange(40) < 10) == pytest.approx(np.abs(f[:10]).mean())
    with pytest.raises(InvalidInputError):
        averaged_norm(f, 2, B=np.zeros(40, bool))


def test_field_file_roundtrip_bit_exact(tmp_path, pareto_field):
    path = tmp_path / "field.txt"
    write_field(path, pareto_field, seed=11)
    back, seed = read_field(path)
    assert seed == 11
    assert np.array_equal(back.omega, pareto_field.omega)
    assert np.array_equal(back.graph.coords, pareto_field.graph.coords)
    write_field(tmp_path / "again.txt", back, seed=11)
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()
