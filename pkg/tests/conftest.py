import numpy as np
import pytest

from degenkernel.environments import EnvironmentSpec, generate
from degenkernel.graph import ConductanceField, LatticeGraph


def unit_field(g: LatticeGraph, c: float = 1.0) -> ConductanceField:
    return ConductanceField(g, np.full(g.num_edges, float(c)))


@pytest.fixture
def ball2():
    return LatticeGraph.ball(2, 6)


@pytest.fixture
def pareto_field(ball2):
    return generate(EnvironmentSpec("iid_pareto", 11, alpha=3.0), ball2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary -------------------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "chemical distance scaling",
    2: "F closed form and explicit inequalities",
    3: "elementary power inequalities",
    4: "solver correctness",
    5: "Monte Carlo against solver",
    6: "a-priori estimate",
    7: "spectral bound",
    8: "energy estimate",
    9: "Gaussian upper bound, CSRW",
    10: "VSRW bound, chemical metric",
    11: "maximal inequality",
    12: "exponent arithmetic",
}
_acceptance: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(k): belongs to acceptance criterion k")


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("acceptance")
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            outcome = "xfail"
        else:
            outcome = report.outcome
        _acceptance.setdefault(number, []).append((report.nodeid.split("::")[-1], outcome))


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            item.user_properties.append(("acceptance", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_TITLES):
        runs = _acceptance.get(k)
        if not runs:
            tr.write_line(f"criterion {k:2d} NOT RUN  {ACCEPTANCE_TITLES[k]}")
            continue
        ok = all(outcome == "passed" for _, outcome in runs)
        status = "PASS" if ok else "FAIL"
        note = ""
        bad = [name for name, outcome in runs if outcome != "passed"]
        if bad:
            note = "  (not passing: " + ", ".join(f"{n} [{o}]" for n, o in
                                                  ((n, dict(runs)[n]) for n in bad)) + ")"
        tr.write_line(f"criterion {k:2d} {status}  {ACCEPTANCE_TITLES[k]}  {len(runs)} checks{note}")
