"""Chemical distance with edge length ``min(1, omega^-1/2)`` and its scaling in layered media."""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.csgraph import dijkstra as sparse_dijkstra

from .environments import EnvironmentSpec, layered_rows
from .errors import InvalidInputError, StripTooSmallError
from .graph import ConductanceField, LatticeGraph


def edge_lengths(field: ConductanceField) -> np.ndarray:
    return np.minimum(1.0, 1.0 / np.sqrt(field.omega))


def shortest_paths(field: ConductanceField, source: int):
    """Single-source Dijkstra on the ball; returns ``(dist, pred)`` arrays.

    Heap entries are ``(distance, vertex index)`` so equal distances are settled
    in lexicographic vertex order, which makes realizing paths reproducible.
    """
    g = field.graph
    length = edge_lengths(field)
    nbr, eid = g.neighbors, g.neighbor_edges
    dist = np.full(g.num_vertices, np.inf)
    pred = np.full(g.num_vertices, -1, dtype=np.int64)
    done = np.zeros(g.num_vertices, dtype=bool)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        du, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for slot in range(nbr.shape[1]):
            v = nbr[u, slot]
            if v < 0 or done[v]:
                continue
            alt = du + length[eid[u, slot]]
            if alt < dist[v] or (alt == dist[v] and u < pred[v]):
                dist[v] = alt
                pred[v] = u
                heapq.heappush(heap, (alt, int(v)))
    assert done.all(), "graph is disconnected"
    return dist, pred


def chemical_distances_from(field: ConductanceField, x) -> np.ndarray:
    src = x if np.ndim(x) == 0 else field.graph.index(x)
    return shortest_paths(field, int(src))[0]


@dataclass(frozen=True)
class ChemicalMetricResult:
    x: tuple
    y: tuple
    d_omega: float
    path: list
    graph_distance: int


def chemical_distance(field: ConductanceField, x, y) -> ChemicalMetricResult:
    """d_omega(x, y) with a realizing path from x to y.

    The search always starts from the endpoint with the smaller index, so the
    value is bitwise symmetric in (x, y).
    """
    g = field.graph
    ix, iy = g.index(x), g.index(y)
    a, b = min(ix, iy), max(ix, iy)
    dist, pred = shortest_paths(field, a)
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    if a == ix:
        path.reverse()
    coords = [tuple(int(c) for c in g.coords[i]) for i in path]
    gd = int(np.abs(g.coords[ix] - g.coords[iy]).sum())
    return ChemicalMetricResult(coords[0], coords[-1], float(dist[b]), coords, gd)


def chemical_ball(field: ConductanceField, x, r: float) -> np.ndarray:
    """Indices of vertices within chemical distance ``r`` of ``x``."""
    if r < 0:
        raise InvalidInputError("radius must be nonnegative")
    return np.nonzero(chemical_distances_from(field, x) <= r)[0]


def path_length(field: ConductanceField, path) -> float:
    g = field.graph
    length = edge_lengths(field)
    total = 0.0
    for a, b in zip(path, path[1:]):
        ia, ib = g.index(a), g.index(b)
        slot = np.nonzero(g.neighbors[ia] == ib)[0]
        if len(slot) == 0:
            raise InvalidInputError(f"{a} and {b} are not adjacent")
        total += length[g.neighbor_edges[ia, slot[0]]]
    return total


# -- layered media ------------------------------------------------------------------

def crossover_exponent(alpha: float) -> float:
    return 2 * alpha / (2 * alpha + 1)


@dataclass(frozen=True)
class UpperBoundPath:
    row: int
    path: list
    bound_value: float


def upper_bound_path(field: ConductanceField, L: int, alpha: float) -> UpperBoundPath:
    """Three-leg path from 0 to L e1 through the best line with |i| <= L^eps."""
    g = field.graph
    reach = int(math.floor(L ** crossover_exponent(alpha)))
    ok = g.index_of([[x, i] for i in (-reach, reach) for x in (0, L)])
    if np.any(ok < 0):
        raise InvalidInputError(f"field does not contain the rows |i| <= {reach} over [0, {L}]")
    rows = np.arange(-reach, reach + 1)
    starts = g.index_of(np.stack([np.zeros_like(rows), rows], axis=1))
    e1 = g.neighbor_edges[starts, 0]
    z = field.omega[e1]
    best = _best_row(rows, z)
    step = 1 if best >= 0 else -1
    path = [(0, i) for i in range(0, best, step)]
    path += [(x, best) for x in range(0, L + 1)]
    path += [(L, i) for i in range(best - step, -step, -step)] if best != 0 else []
    return UpperBoundPath(int(best), path, path_length(field, path))


def _best_row(rows: np.ndarray, z: np.ndarray) -> int:
    # largest conductance; ties go to the smallest |i|, then the smaller i
    order = np.lexsort((rows, np.abs(rows), -z))
    return int(rows[order[0]])


def strip_distance(spec: EnvironmentSpec, L: int, half_height: int):
    """Exact d_omega(0, L e1) on the strip [0, L] x [-h, h].

    Returns ``(distance, max |row| visited by the realizing path)``.
    """
    h = half_height
    rows = np.arange(-h, h + 1)
    z = layered_rows(spec, rows)
    W, H = L + 1, 2 * h + 1
    idx = np.arange(W * H).reshape(H, W)  # idx[row, x]
    horiz_len = np.repeat(np.minimum(1.0, 1.0 / np.sqrt(z)), L)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    w = np.concatenate([horiz_len, np.ones((H - 1) * W)])
    adj = sp.csr_matrix((w, (a, b)), shape=(W * H, W * H))
    src, dst = idx[h, 0], idx[h, L]
    dist, pred = sparse_dijkstra(adj, directed=False, indices=src, return_predecessors=True)
    top = 0
    v = dst
    while v != src:
        top = max(top, abs(v // W - h))
        v = pred[v]
    return float(dist[dst]), int(top)


def layered_distance(spec: EnvironmentSpec, L: int, *, initial_half_height: int | None = None,
                     max_half_height: int = 1 << 16):
    """d_omega(0, L e1) certified against the strip edge by doubling its height.

    A path that leaves the strip [-h, h] must climb at least h + 1 rows and come
    back, costing more than 2 (h + 1); if the strip optimum is no larger, it is
    the optimum over the whole plane.
    """
    h = initial_half_height or int(math.ceil(0.5 * L ** crossover_exponent(spec.alpha))) + 1
    while True:
        d, top = strip_distance(spec, L, h)
        if d <= 2 * (h + 1) and top < h:
            return d, h, top
        new_h = max(2 * h, int(math.ceil(d / 2)))
        if new_h > max_half_height:
            raise StripTooSmallError(f"optimal path for L={L} still touches a strip of half-height {h}")
        h = new_h


def layered_upper_bound(spec: EnvironmentSpec, L: int) -> tuple[float, int]:
    """Length of the three-leg path for the layered field generated by ``spec``."""
    reach = int(math.floor(L ** crossover_exponent(spec.alpha)))
    rows = np.arange(-reach, reach + 1)
    z = layered_rows(spec, rows)
    best = _best_row(rows, z)
    return 2 * abs(best) + L * min(1.0, 1.0 / math.sqrt(z[rows == best][0])), best


@dataclass
class ScalingReport:
    alpha: float
    delta: float
    rows: list = dc_field(default_factory=list)
    slope: float = float("nan")
    slope_ci: tuple = (float("nan"), float("nan"))
    corrected_slope: float = float("nan")
    corrected_slope_ci: tuple = (float("nan"), float("nan"))
    theory: float = float("nan")
    bracket: dict = dc_field(default_factory=dict)

    def csv_rows(self):
        for r in self.rows:
            yield (self.alpha, self.delta, r["L"], r["seed"], r["d_omega"], r["upper_bound"])


def _cell(args):
    spec, L = args
    d, h, top = layered_distance(spec, L)
    ub, best = layered_upper_bound(spec, L)
    return {"L": L, "seed": spec.seed, "d_omega": d, "upper_bound": ub,
            "half_height": h, "max_row": top, "best_row": best}


def _ols(X: np.ndarray, y: np.ndarray, col: int, level: float = 0.95):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    dof = len(y) - X.shape[1]
    resid = y - X @ beta
    s2 = resid @ resid / dof if dof > 0 else float("nan")
    cov = s2 * np.linalg.inv(X.T @ X)
    half = stats.t.ppf(0.5 + level / 2, dof) * math.sqrt(cov[col, col]) if dof > 0 else float("nan")
    return float(beta[col]), (float(beta[col] - half), float(beta[col] + half))


def scaling_experiment(alpha: float, delta: float, L_list, seeds, *, c_z: float = 1.0,
                       jobs: int = 1) -> ScalingReport:
    """Exact d_omega(0, L e1) over a grid of L and seeds, with a log-log fit.

    ``slope`` regresses log d on log L. ``corrected_slope`` adds a log log L
    column; with six values of L it is poorly conditioned and only diagnostic.
    """
    L_list = sorted(int(L) for L in L_list)
    seeds = list(seeds)
    if not alpha > 1:
        raise InvalidInputError("alpha must exceed 1")
    if len(L_list) < 4 or len(seeds) < 8:
        raise InvalidInputError("need at least 4 values of L and 8 seeds")
    ratios = np.diff(np.log(L_list))
    if not np.allclose(ratios, ratios[0], rtol=1e-6):
        raise InvalidInputError("L_list must be geometric")
    tasks = [(EnvironmentSpec("layered", s, alpha=alpha, c_z=c_z), L) for L in L_list for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_cell, tasks))
    else:
        rows = [_cell(t) for t in tasks]
    logL = np.log([r["L"] for r in rows])
    logd = np.log([r["d_omega"] for r in rows])
    ones = np.ones_like(logL)
    slope, ci = _ols(np.column_stack([ones, logL]), logd, 1)
    corrected, corrected_ci = _ols(np.column_stack([ones, logL, np.log(logL)]), logd, 1)
    eps = crossover_exponent(alpha)
    return ScalingReport(
        alpha, delta, rows, slope, ci, corrected, corrected_ci, eps,
        bracket={"exponent": eps,
                 "lower_log_power": -(1 + delta) / (2 * alpha + 1),
                 "upper_log_power": delta / (2 * alpha)},
    )
