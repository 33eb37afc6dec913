"""Heat kernels of the constant and variable speed walks on truncated balls.

Kernels are computed by uniformization: with ``Lam`` the largest exit rate on
the interior, ``exp(tL) = sum_k Poisson(k; Lam t) P^k`` where
``P = I + L / Lam`` is substochastic.  All terms are nonnegative, so the
series is evaluated without cancellation, and the omitted Poisson tail is a
rigorous l1 error bound.  Vertices on the boundary of the ball are absorbing;
the mass they swallow is accumulated separately as ``leaked``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .errors import InvalidInputError, ResourceLimitError, TruncationError
from .graph import ConductanceField, LatticeGraph

log = logging.getLogger(__name__)

WALKS = ("CSRW", "VSRW")
PSI_CLAMP = 40.0
DEFAULT_TOL = 1e-8
VERTEX_CAP = 2_000_000
MAX_STEPS = 5_000_000


def _walk(walk: str) -> str:
    w = walk.upper()
    if w not in WALKS:
        raise InvalidInputError(f"walk must be one of {WALKS}, got {walk!r}")
    return w


@dataclass(frozen=True, eq=False)
class GeneratorOperator:
    """Sparse generator of a walk on a ball.

    ``rates[x, y]`` is the jump rate from x to y.  The full (unkilled)
    operator is ``rates - diag(exit_rate)``; the absorbing version restricted
    to the interior is exposed through :meth:`dirichlet`.
    """

    field: ConductanceField
    walk: str
    rates: sp.csr_matrix
    exit_rate: np.ndarray
    weight: np.ndarray

    @property
    def graph(self) -> LatticeGraph:
        return self.field.graph

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Lf on all vertices, using only the edges inside the ball."""
        f = np.asarray(f, dtype=np.float64)
        diag = self.exit_rate if f.ndim == 1 else self.exit_rate[:, None]
        return self.rates @ f - diag * f

    def apply_dirichlet(self, f: np.ndarray) -> np.ndarray:
        """Lf with f forced to zero on the boundary; result is zero there too."""
        f = np.where(self.graph.interior, f, 0.0)
        out = self.apply(f)
        out[self.graph.boundary] = 0.0
        return out

    def dirichlet(self):
        """(interior indices, rate block on the interior, exit rates, absorption rates)."""
        inner = np.nonzero(self.graph.interior)[0]
        R = self.rates[inner][:, inner].tocsr()
        exit_ = self.exit_rate[inner]
        absorb = exit_ - np.asarray(R.sum(axis=1)).ravel()
        return inner, R, exit_, np.maximum(absorb, 0.0)


def build_generator(field: ConductanceField, walk: str = "CSRW", *, verify: bool = True) -> GeneratorOperator:
    """Assemble the CSRW (``mu^-1 sum omega``) or VSRW (``sum omega``) generator."""
    walk = _walk(walk)
    g = field.graph
    if g.num_vertices > VERTEX_CAP:
        raise ResourceLimitError(f"{g.num_vertices} vertices exceed the cap {VERTEX_CAP}")
    if not g.is_connected:
        raise InvalidInputError("graph is not connected")
    mu = field.mu
    assert np.all(mu > 0), "isolated vertex"
    rows = np.concatenate([g.minus, g.plus])
    cols = np.concatenate([g.plus, g.minus])
    w = np.concatenate([field.omega, field.omega])
    if walk == "CSRW":
        w = w / mu[rows]
        weight = mu
    else:
        weight = np.ones(g.num_vertices)
    n = g.num_vertices
    rates = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    exit_rate = rates @ np.ones(n)  # same summation order as apply, so L1 = 0 exactly
    gen = GeneratorOperator(field, walk, rates, exit_rate, weight)
    if verify:
        _verify_speed_identity(field)
    return gen


def _verify_speed_identity(field: ConductanceField) -> None:
    # L_V f = mu * L_C f, checked on a fixed pseudo-random vector
    g = field.graph
    f = np.random.default_rng(12345).standard_normal(g.num_vertices)
    grad = f[g.plus] - f[g.minus]
    flux = np.bincount(g.minus, weights=field.omega * grad, minlength=g.num_vertices)
    flux -= np.bincount(g.plus, weights=field.omega * grad, minlength=g.num_vertices)
    lv = flux
    lc = flux / field.mu
    scale = np.abs(lv).max() + 1e-300
    if np.abs(lv - field.mu * lc).max() > 1e-12 * scale:
        raise AssertionError("variable speed generator is not mu times the constant speed one")


# -- uniformization core ----------------------------------------------------------

def _poisson_table(lam: np.ndarray, tail: float, max_steps: int):
    lam_max = float(lam.max()) if lam.size else 0.0
    K = int(poisson.isf(tail, lam_max)) + 1 if lam_max > 0 else 0
    if K > max_steps:
        raise ResourceLimitError(f"uniformization needs {K} steps (cap {max_steps})")
    ks = np.arange(K + 1)
    weights = poisson.pmf(ks[None, :], lam[:, None])
    weights[lam == 0, 0] = 1.0
    omitted = poisson.sf(K, lam)
    omitted[lam == 0] = 0.0
    return K, weights, omitted


def _series(step, w0: np.ndarray, weights: np.ndarray, absorb: np.ndarray | None):
    """Accumulate sum_k weights[:, k] * step^k(w0) and the absorbed-mass ledger."""
    T, K1 = weights.shape
    out = np.zeros((T,) + w0.shape)
    leaked = np.zeros(T)
    w = w0.copy()
    absorbed = 0.0
    for k in range(K1):
        wk = weights[:, k]
        live = wk > 0
        if live.any():
            out[live] += np.multiply.outer(wk[live], w)
            leaked[live] += wk[live] * absorbed
        if k + 1 < K1:
            if absorb is not None:
                absorbed = absorbed + float(absorb @ w)
            w = step(w)
    return out, leaked


@dataclass(frozen=True, eq=False)
class KernelSolution:
    """Heat kernel from a fixed source on a time grid.

    ``p[i, x]`` is the probability that the walk started at ``source`` sits at
    ``x`` at time ``times[i]`` (equal to p(t, x, source) by reversibility);
    ``q`` is the kernel density: ``p / mu`` for the CSRW and ``p`` for the VSRW.
    ``omitted`` bounds the l1 error of every row; ``leaked`` is the mass
    absorbed at the boundary.  ``measure`` is the reference measure of the
    density (mu or counting).  ``psi`` is set for perturbed kernels.
    """

    graph: LatticeGraph
    walk: str
    source: int
    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    leaked: np.ndarray
    omitted: np.ndarray
    tol: float
    measure: np.ndarray
    psi: np.ndarray | None = None

    @property
    def radius(self):
        return self.graph.radius

    @property
    def mass(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def source_point(self) -> tuple:
        return tuple(int(c) for c in self.graph.coords[self.source])

    def time_index(self, t: float) -> int:
        hits = np.nonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))[0]
        if len(hits) == 0:
            raise InvalidInputError(f"time {t} is not on the grid")
        return int(hits[0])

    def kernel(self, t: float) -> np.ndarray:
        return self.q[self.time_index(t)]


def solve_kernel(gen: GeneratorOperator, source, times, tol: float = DEFAULT_TOL, *,
                 tail: float | None = None, on_leak: str = "raise",
                 max_steps: int = MAX_STEPS, cache: bool = True) -> KernelSolution:
    """Kernel from ``source`` (vertex index or lattice point) at each of ``times``.

    ``tail`` is the Poisson mass left out of the series (default ``tol * 1e-4``).
    If more than ``tol`` of the mass leaks into the boundary, ``on_leak``
    decides between raising :class:`TruncationError`, warning, or ignoring it.
    """
    if not 1e-12 < tol < 1e-4:
        raise InvalidInputError("tol must lie in (1e-12, 1e-4)")
    if on_leak not in ("raise", "warn", "ignore"):
        raise InvalidInputError("on_leak must be raise, warn or ignore")
    g = gen.graph
    src = _source_index(g, source)
    if g.boundary[src]:
        raise InvalidInputError("source lies on the boundary")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise InvalidInputError("times must be finite and nonnegative")
    tail = tol * 1e-4 if tail is None else float(tail)

    key = _cache_key(gen, src, times, tail) if cache else None
    cached = _cache_load(key)
    if cached is not None:
        p, leaked, omitted = cached
    else:
        p, leaked, omitted = _forward(gen, src, times, tail, max_steps)
        _cache_store(key, p, leaked, omitted)

    q = p / gen.weight
    sol = KernelSolution(g, gen.walk, src, times, p, q, leaked, omitted, tol, gen.weight)
    worst = float(leaked.max(initial=0.0))
    if worst > tol and on_leak != "ignore":
        need = required_radius(gen, times.max(), tol)
        msg = (f"{worst:.3g} of the mass leaked through the boundary of a radius-{g.radius} ball "
               f"by t={times.max():g}; radius {need} suffices")
        if on_leak == "raise":
            raise TruncationError(msg, need)
        log.warning(msg)
    return sol


def _source_index(g: LatticeGraph, source) -> int:
    if np.ndim(source) == 0:
        src = int(source)
        if not 0 <= src < g.num_vertices:
            raise InvalidInputError("source index out of range")
        return src
    return g.index(source)


def _forward(gen: GeneratorOperator, src: int, times: np.ndarray, tail: float, max_steps: int):
    g = gen.graph
    inner, R, exit_, absorb = gen.dirichlet()
    lam_rate = float(exit_.max())
    K, weights, omitted = _poisson_table(lam_rate * times, tail, max_steps)
    stepT = (R.T / lam_rate).tocsr()
    stay = 1.0 - exit_ / lam_rate
    w0 = np.zeros(len(inner))
    w0[np.searchsorted(inner, src)] = 1.0
    out, leaked = _series(lambda w: stepT @ w + stay * w, w0, weights, absorb / lam_rate)
    p = np.zeros((len(times), g.num_vertices))
    p[:, inner] = out
    neg = p < 0
    if neg.any():
        log.info("clipped %d negative kernel entries", int(neg.sum()))
        p[neg] = 0.0
    return p, leaked, omitted


def required_radius(gen: GeneratorOperator, t: float, tol: float) -> int:
    """A radius at which at most ``tol`` mass can reach the boundary by time ``t``.

    The walk needs at least r jumps to travel r steps, and its jump count is
    dominated by a Poisson process with the largest exit rate.
    """
    lam = float(gen.exit_rate.max()) * t
    return int(poisson.isf(tol, lam)) + 1


def evolve(gen: GeneratorOperator, f, times, *, tail: float = 1e-12,
           max_steps: int = MAX_STEPS) -> np.ndarray:
    """u(t) = exp(t L) f with Dirichlet boundary; rows indexed like ``times``."""
    g = gen.graph
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != g.num_vertices:
        raise InvalidInputError("f must be a vertex function")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    inner, R, exit_, _ = gen.dirichlet()
    lam_rate = float(exit_.max())
    _, weights, _ = _poisson_table(lam_rate * times, tail, max_steps)
    step = (R / lam_rate).tocsr()
    stay = 1.0 - exit_ / lam_rate
    stay_b = stay if f.ndim == 1 else stay[:, None]
    out, _ = _series(lambda w: step @ w + stay_b * w, f[inner], weights, None)
    u = np.zeros((len(times),) + f.shape)
    u[:, inner] = out
    return u


def kernel_matrix(gen: GeneratorOperator, t: float, *, tail: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Dense transition matrix P_x[walk_t = y] over interior vertices.

    Returns ``(interior_indices, M)``.  Intended for balls of a few hundred vertices.
    """
    inner = np.nonzero(gen.graph.interior)[0]
    if len(inner) > 5000:
        raise ResourceLimitError("kernel_matrix is limited to 5000 interior vertices")
    eye = np.zeros((gen.graph.num_vertices, len(inner)))
    eye[inner, np.arange(len(inner))] = 1.0
    cols = evolve(gen, eye, [t], tail=tail)[0]  # column y = P_x[X_t = y] as a function of x
    return inner, cols[inner]


def chapman_kolmogorov_check(gen: GeneratorOperator, t: float, s: float, *,
                             leak_limit: float | None = None, source=None) -> float:
    """max |P_{t+s} - P_t P_s| over interior rows.

    The killed semigroup satisfies the identity exactly, so by default every
    interior row is compared.  ``leak_limit`` restricts the comparison to rows
    whose absorbed mass at t + s stays below it.
    """
    inner, Mt = kernel_matrix(gen, t)
    _, Ms = kernel_matrix(gen, s)
    _, Mts = kernel_matrix(gen, t + s)
    dev = np.abs(Mts - Mt @ Ms)
    if source is not None:
        col = np.searchsorted(inner, _source_index(gen.graph, source))
        dev = dev[:, [col]]
    if leak_limit is not None:
        dev = dev[(1.0 - Mts.sum(axis=1)) <= leak_limit]
    return float(dev.max(initial=0.0))


@dataclass(frozen=True)
class TruncationReport:
    ok: bool
    leaked_bound: float
    discrepancy: float
    radius: int


def truncation_check(field_factory, d: int, source, t: float, radius: int, *, walk: str = "CSRW",
                     tol: float = DEFAULT_TOL, vertex_cap: int = VERTEX_CAP) -> TruncationReport:
    """Compare kernels on balls of radius R and 2R around ``source``.

    ``field_factory`` maps a :class:`LatticeGraph` to its field; pass an
    :class:`~degenkernel.environments.EnvironmentSpec` to regenerate a random
    environment consistently on both balls.
    """
    from .environments import EnvironmentSpec, _ball_size, generate

    if isinstance(field_factory, EnvironmentSpec):
        spec = field_factory
        field_factory = lambda g: generate(spec, g)  # noqa: E731
    if _ball_size(d, 2 * radius) > vertex_cap:
        raise ResourceLimitError(f"radius {2 * radius} ball exceeds the vertex cap {vertex_cap}")
    x0 = np.asarray(source, dtype=np.int64)
    sols = []
    for r in (radius, 2 * radius):
        g = LatticeGraph.ball(d, r, x0)
        gen = build_generator(field_factory(g), walk, verify=False)
        sols.append(solve_kernel(gen, x0, [t], tol, on_leak="ignore", cache=False))
    small, big = sols
    near = small.graph.subball(x0, radius // 2)
    idx_big = big.graph.index_of(small.graph.coords[near])
    disc = float(np.abs(small.p[0, near] - big.p[0, idx_big]).max())
    leak = float(big.leaked[0])
    return TruncationReport(disc <= tol and leak <= tol / 10, leak, disc, radius)


# -- perturbed kernels ------------------------------------------------------------

def _check_psi(psi: np.ndarray, g: LatticeGraph) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (g.num_vertices,):
        raise InvalidInputError("psi must be a vertex function")
    if np.abs(psi).max(initial=0.0) > PSI_CLAMP:
        raise InvalidInputError(f"|psi| exceeds the exponent cap {PSI_CLAMP}")
    return psi


def perturbed_kernel(sol: KernelSolution, psi) -> KernelSolution:
    """Conjugated kernel exp(psi(x)) q(t, x, y) exp(-psi(y)) with y the source."""
    psi = getattr(psi, "psi", psi)
    psi = _check_psi(psi, sol.graph)
    factor = np.exp(psi - psi[sol.source])
    return replace(sol, p=sol.p * factor, q=sol.q * factor, psi=psi)


def apply_perturbed(gen: GeneratorOperator, psi, v: np.ndarray) -> np.ndarray:
    """L_phi v = phi L(v / phi) with phi = exp(psi), Dirichlet boundary."""
    psi = _check_psi(getattr(psi, "psi", psi), gen.graph)
    phi = np.exp(psi)
    return phi * gen.apply_dirichlet(v / phi)


def perturbed_residual(gen: GeneratorOperator, source, psi, times, *, h: float = 1e-3,
                       tol: float = DEFAULT_TOL) -> float:
    """max |d/dt v - L_phi v| for the perturbed kernel, d/dt by central differences."""
    times = np.asarray(times, dtype=np.float64)
    if np.any(times - h < 0):
        raise InvalidInputError("grid times must exceed the difference step")
    grid = np.concatenate([times - h, times, times + h])
    sol = perturbed_kernel(solve_kernel(gen, source, grid, tol, on_leak="ignore", cache=False), psi)
    T = len(times)
    v_minus, v, v_plus = sol.q[:T], sol.q[T:2 * T], sol.q[2 * T:]
    dvdt = (v_plus - v_minus) / (2 * h)
    res = [np.abs(dvdt[i] - apply_perturbed(gen, sol.psi, v[i]))[gen.graph.interior].max()
           for i in range(T)]
    return float(max(res))


# -- optional on-disk cache ----------------------------------------------------------

def _cache_dir() -> Path | None:
    root = os.environ.get("DEGENKERNEL_CACHE")
    return Path(root) if root else None


def _cache_key(gen: GeneratorOperator, src: int, times: np.ndarray, tail: float) -> str | None:
    if _cache_dir() is None:
        return None
    h = hashlib.sha256()
    for arr in (gen.graph.coords, gen.field.omega, times):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(f"{gen.walk}|{src}|{tail!r}".encode())
    return h.hexdigest()


def _cache_load(key):
    if key is None:
        return None
    path = _cache_dir() / f"{key}.npz"
    if not path.exists():
        return None
    with np.load(path) as z:
        return z["p"], z["leaked"], z["omitted"]


def _cache_store(key, p, leaked, omitted) -> None:
    if key is None:
        return
    d = _cache_dir()
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / f".{key}.{os.getpid()}.npz"
    np.savez(tmp, p=p, leaked=leaked, omitted=omitted)
    os.replace(tmp, d / f"{key}.npz")
