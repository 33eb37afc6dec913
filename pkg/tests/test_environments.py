import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degenkernel.environments import (
    KINDS,
    EnvironmentSpec,
    MomentDivergenceWarning,
    check_exponent_condition,
    generate,
    kappa_gamma,
    layered_rows,
    moment_norms,
    vsrw_alpha,
)
from degenkernel.errors import ConditionViolatedError, InvalidInputError
from degenkernel.graph import LatticeGraph

exps = st.one_of(st.floats(1.01, 50.0), st.just(math.inf))


def test_uniform_elliptic_one_is_constant():
    g = LatticeGraph.ball(2, 5)
    assert np.all(generate(EnvironmentSpec("uniform_elliptic", 3, c=1.0), g).omega == 1.0)


def test_uniform_elliptic_range():
    g = LatticeGraph.ball(2, 10)
    om = generate(EnvironmentSpec("uniform_elliptic", 3, c=4.0), g).omega
    assert om.min() >= 0.25 and om.max() <= 4.0


def test_layered_constant_along_lines():
    g = LatticeGraph.ball(2, 12)
    spec = EnvironmentSpec("layered", 5, alpha=2.0)
    f = generate(spec, g)
    assert np.all(f.omega[g.axis == 1] == 1.0)
    horiz = g.axis == 0
    rows = g.coords[g.minus[horiz], 1]
    for k in np.unique(rows):
        vals = f.omega[horiz][rows == k]
        assert np.all(vals == vals[0])
        assert vals[0] == layered_rows(spec, [k])[0]
    assert np.all(f.nu <= 4.0)


def test_generate_is_deterministic_and_order_free():
    spec = EnvironmentSpec("iid_pareto", 99, alpha=2.5)
    small = generate(spec, LatticeGraph.ball(2, 4))
    again = generate(spec, LatticeGraph.ball(2, 4))
    assert small.omega.tobytes() == again.omega.tobytes()
    # the same edge gets the same weight on a larger, shifted graph
    big = generate(spec, LatticeGraph.ball(2, 9, (1, 1)))
    bg = big.graph
    for e in range(0, small.graph.num_edges, 7):
        a = small.graph.coords[small.graph.minus[e]]
        b = small.graph.coords[small.graph.plus[e]]
        ia, ib = bg.index(a), bg.index(b)
        slot = np.nonzero(bg.neighbors[ia] == ib)[0][0]
        assert big.omega[bg.neighbor_edges[ia, slot]] == small.omega[e]
    other = generate(spec.with_seed(100), LatticeGraph.ball(2, 4))
    assert not np.array_equal(other.omega, small.omega)


@pytest.mark.parametrize("kind", KINDS)
def test_weights_positive(kind):
    f = generate(EnvironmentSpec(kind, 1, c=3.0, alpha=1.5, gamma_tail=0.5), LatticeGraph.ball(2, 15))
    assert np.all(f.omega > 0) and np.all(np.isfinite(f.omega))


@pytest.mark.parametrize("bad", [
    dict(kind="iid_pareto", alpha=1.0),
    dict(kind="layered", alpha=0.5),
    dict(kind="uniform_elliptic", c=0.5),
    dict(kind="iid_polynomial_lower_tail", gamma_tail=0.0),
    dict(kind="gaussian"),
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidInputError):
        EnvironmentSpec(**bad)


def test_pareto_tail_frequencies():
    g = LatticeGraph.box((0, 0), (707, 707))
    om = generate(EnvironmentSpec("iid_pareto", 2024, alpha=2.0), g).omega
    n = om.size
    assert n >= 10**6
    for u in (2.0, 4.0, 8.0):
        p = u**-2.0
        freq = (om > u).mean()
        assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_constant_field_norms():
    g = LatticeGraph.ball(2, 12)
    f = generate(EnvironmentSpec("uniform_elliptic"), g).scaled(2.5)
    rep = moment_norms(f, 2.0, 3.0, radii=[1, 4, 11])
    assert np.allclose(rep.mu_norms, 10.0)
    assert np.allclose(rep.nu_norms, 4 / 2.5)
    assert rep.stabilized and rep.stabilization_radius == 1


def test_pareto_second_moment_converges():
    # oracle: E[mu^2] from 10^7 independent draws of mu = Z1 + ... + Z4
    rng = np.random.default_rng(7)
    acc = 0.0
    for _ in range(10):
        z = np.maximum(1.0, rng.random((10**6, 4)) ** (-1 / 3))
        acc += float((z.sum(axis=1) ** 2).sum())
    oracle = acc / 10**7
    assert oracle == pytest.approx(39.0, rel=0.05)  # 4 E[Z^2] + 12 E[Z]^2
    g = LatticeGraph.ball(2, 65)
    f = generate(EnvironmentSpec("iid_pareto", 3, alpha=3.0), g)
    rep = moment_norms(f, 2.0, 2.0, radii=[8, 16, 32, 64])
    assert rep.mu_norms[-1] ** 2 == pytest.approx(oracle, rel=0.10)


def test_moment_flags_and_warning():
    g = LatticeGraph.ball(2, 20)
    spec = EnvironmentSpec("layered", 4, alpha=2.0)
    f = generate(spec, g)
    ok = moment_norms(f, 1.5, 1.5, radii=[2, 4, 8, 16], env=spec)
    assert not any("divergent" in m for m in ok.flags)
    assert ok.stabilized
    with pytest.warns(MomentDivergenceWarning):
        bad = moment_norms(f, 3.0, 1.5, radii=[2, 4, 8, 16], env=spec)
    assert any("divergent" in m for m in bad.flags)
    assert bad.mu_norms  # still reported


def test_moment_norms_rejects_small_graph():
    f = generate(EnvironmentSpec("uniform_elliptic"), LatticeGraph.ball(2, 5))
    with pytest.raises(InvalidInputError):
        moment_norms(f, 2, 2, radii=[2, 5])
    with pytest.raises(InvalidInputError):
        moment_norms(f, 2, 2, radii=[3, 2])


def test_infinite_norm_dominates():
    g = LatticeGraph.ball(2, 20)
    f = generate(EnvironmentSpec("iid_pareto", 8, alpha=1.5), g)
    radii = [3, 6, 12]
    inf = moment_norms(f, math.inf, math.inf, radii=radii)
    for p in (1.5, 2.0, 6.0):
        fin = moment_norms(f, p, p, radii=radii)
        assert np.all(np.array(fin.mu_norms) <= np.array(inf.mu_norms))
        assert np.all(np.array(fin.nu_norms) <= np.array(inf.nu_norms))


def test_exponent_condition_examples():
    r = check_exponent_condition(math.inf, math.inf, 2)
    assert r.holds and r.slack == 1.0
    assert check_exponent_condition(4, 4, 2).slack == 0.5
    v = check_exponent_condition(2, 4, 2, "VSRW")
    assert not v.holds and v.slack == pytest.approx(-0.25)
    with pytest.raises(InvalidInputError):
        check_exponent_condition(1.0, 4, 2)


@settings(max_examples=200)
@given(p=exps, q=exps, dp=st.floats(2.0, 6.0))
def test_vsrw_condition_implies_csrw(p, q, dp):
    if check_exponent_condition(p, q, dp, "VSRW").holds:
        assert check_exponent_condition(p, q, dp, "CSRW").holds
    vs = check_exponent_condition(p, q, dp, "VSRW").slack
    cs = check_exponent_condition(p, q, dp).slack
    assert vs == cs if math.isinf(p) else vs < cs


def test_kappa_gamma_examples():
    assert kappa_gamma(math.inf, math.inf, 2, 2) == (0.5, 0.0)
    k, gam = kappa_gamma(8, 8, 2, 2)
    assert k == pytest.approx(7 / 12) and gam == pytest.approx(1 / 6)
    with pytest.raises(ConditionViolatedError):
        kappa_gamma(2, 2, 2, 2)


def test_kappa_blows_up_as_slack_vanishes():
    # 1/p + 1/q -> 1 from below along p = q = 2 + eps
    kappas = [kappa_gamma(2 + eps, 2 + eps, 2, 2)[0] for eps in np.geomspace(1, 1e-6, 13)]
    assert np.all(np.diff(kappas) > 0) and kappas[-1] > 1e4


def test_vsrw_alpha_requires_condition():
    assert vsrw_alpha(0, 8, 8, 2, 2) == 1.0
    with pytest.raises(ConditionViolatedError):
        vsrw_alpha(1, 2, 4, 2, 2)
