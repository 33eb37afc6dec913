"""Exponential perturbations, the rate function F and Gaussian-type bound fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InvalidInputError
from .graph import ConductanceField, LatticeGraph, gradient
from .heat import PSI_CLAMP, KernelSolution


@dataclass(frozen=True, eq=False)
class PerturbationPotential:
    psi: np.ndarray
    graph: LatticeGraph
    metric: str = "graph"
    field: ConductanceField | None = None

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.psi)

    @property
    def lam(self) -> float:
        return float(np.abs(gradient(self.psi, self.graph)).max(initial=0.0))

    @property
    def lam1(self) -> float:
        if self.field is None:
            raise InvalidInputError("lambda_1 needs the conductance field")
        w = np.maximum(1.0, self.field.omega)
        return float((np.sqrt(w) * np.abs(gradient(self.psi, self.graph))).max(initial=0.0))


def make_min_potential(field_or_graph, x, y, lam: float, metric: str = "graph") -> PerturbationPotential:
    """psi(u) = -lam * min(dist(x, u), dist(x, y)) in the graph or chemical metric."""
    if not lam > 0:
        raise InvalidInputError("lambda must be positive")
    field = field_or_graph if isinstance(field_or_graph, ConductanceField) else None
    g = field.graph if field is not None else field_or_graph
    if metric == "graph":
        dist = g.distances_from(x).astype(np.float64)
    elif metric == "chemical":
        if field is None:
            raise InvalidInputError("the chemical metric needs a conductance field")
        from .chemdist import chemical_distances_from

        dist = chemical_distances_from(field, g.index(x))
    else:
        raise InvalidInputError(f"unknown metric {metric!r}")
    cap = dist[g.index(y)]
    if lam * cap > PSI_CLAMP:
        raise InvalidInputError(f"lambda * dist = {lam * cap:g} exceeds the exponent cap {PSI_CLAMP}")
    psi = -lam * np.minimum(dist, cap)
    return PerturbationPotential(psi, g, metric, field)


def _ratio(psi, g: LatticeGraph) -> np.ndarray:
    psi = getattr(psi, "psi", psi)
    phi = np.exp(np.asarray(psi, dtype=np.float64))
    return phi[g.plus] / phi[g.minus]


def h_phi(psi, g: LatticeGraph) -> float:
    r = _ratio(psi, g)
    # r + 1/r - 2 written without cancellation
    return float(((r - 1.0) ** 2 / r).max(initial=0.0))


def h_tilde(psi, field: ConductanceField) -> float:
    r = _ratio(psi, field.graph)
    return float((np.maximum(1.0, field.omega) * (r - 1.0) ** 2 / r).max(initial=0.0))


def sharp_rate(psi, field: ConductanceField, walk: str = "CSRW") -> float:
    """max_x (2 w(x))^-1 sum_y omega(x, y) (r + 1/r - 2), with w = mu (CSRW) or 1 (VSRW).

    This bounds the growth rate of ||phi P_t f|| in l^2(w) from above. For the
    CSRW it never exceeds h/2; for the VSRW it can reach d * h_tilde when omega <= 1.
    """
    g = field.graph
    r = _ratio(psi, g)
    per_edge = field.omega * (r - 1.0) ** 2 / r
    total = np.bincount(g.minus, per_edge, g.num_vertices) + np.bincount(g.plus, per_edge, g.num_vertices)
    walk = walk.upper()
    if walk == "CSRW":
        total = total / field.mu
    elif walk != "VSRW":
        raise InvalidInputError(f"unknown walk {walk!r}")
    return float(0.5 * total[g.interior].max(initial=0.0))


def a_phi(psi, g: LatticeGraph) -> float:
    r = _ratio(psi, g)
    return float(((r + 1.0) ** 2 / (4.0 * r)).max(initial=1.0))


# -- rate function ---------------------------------------------------------------------

def davies_F(s: float, mode: str = "closed_form") -> float:
    """F(s) = inf over lam > 0 of (-lam + (cosh lam - 1) / s)."""
    if not s > 0:
        raise InvalidInputError("s must be positive")
    if mode == "closed_form":
        return s / (1.0 + math.sqrt(1.0 + s * s)) - math.asinh(s)
    if mode == "numeric_inf":
        return _numeric_F(s)
    raise InvalidInputError(f"unknown mode {mode!r}")


def _objective(lam: float, s: float) -> float:
    return -lam + 2.0 * math.sinh(lam / 2.0) ** 2 / s


def _numeric_F(s: float) -> float:
    grid = np.geomspace(1e-8, 60.0, 600)
    vals = -grid + 2.0 * np.sinh(grid / 2.0) ** 2 / s
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(_objective, bounds=(lo, hi), args=(s,), method="bounded",
                          options={"xatol": 1e-14 * max(1.0, hi), "maxiter": 500})
    return float(min(res.fun, vals[i]))


# -- bound formulas ------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundConstants:
    c1: float
    c2: float
    c3: float
    c4: float

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "c4"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")


@dataclass(frozen=True)
class BoundEvaluation:
    regime: str
    value: float
    gaussian: float
    subgaussian: float


def bound_rhs(t: float, dist: float, constants: BoundConstants, d: int = 2) -> BoundEvaluation:
    """Both branches of the two-regime bound; ``value`` follows dist vs c1 t."""
    if not t > 0:
        raise InvalidInputError("t must be positive")
    c = constants
    pre = c.c2 * t ** (-d / 2)
    gauss = pre * math.exp(-c.c3 * dist * dist / t)
    sub = pre * math.exp(-c.c4 * dist * max(1.0, math.log(dist / t)) if dist > 0 else 0.0)
    regime = "gaussian" if dist <= c.c1 * t else "subgaussian"
    return BoundEvaluation(regime, gauss if regime == "gaussian" else sub, gauss, sub)


def log_envelope(t, dist, d: int, gamma: float, c: float = 1.0):
    """log of c t^{-d/2} (1 + dist/sqrt t)^gamma exp(dist F(dist / 4t))."""
    t = np.asarray(t, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    s = dist / (4.0 * t)
    F = np.where(s > 0, s / (1.0 + np.sqrt(1.0 + s * s)) - np.arcsinh(s), 0.0)
    return (math.log(c) - d / 2 * np.log(t) + gamma * np.log1p(dist / np.sqrt(t)) + dist * F)


def envelope(t: float, dist: float, d: int, gamma: float, c: float = 1.0) -> float:
    return float(np.exp(log_envelope(t, dist, d, gamma, c)))


# -- fitting ----------------------------------------------------------------------------------

MARGIN_ATOL = 1e-9

@dataclass
class KernelRecords:
    """Flat table of kernel values against (t, dist); ``floor`` marks resolution."""

    t: np.ndarray
    dist: np.ndarray
    value: np.ndarray
    floor: np.ndarray

    def resolved(self) -> "KernelRecords":
        keep = self.value > self.floor
        return KernelRecords(self.t[keep], self.dist[keep], self.value[keep], self.floor[keep])

    def __len__(self):
        return len(self.t)


def kernel_records(solutions, dist_fn=None, *, resolution: float = 100.0) -> KernelRecords:
    """Collect kernel values q(t, source, y) with their distance to the source.

    ``dist_fn(sol)`` returns distances from the source (default: graph metric).
    A value counts as resolved when it exceeds ``resolution`` times the
    absolute error budget (omitted series mass plus leaked mass, in kernel units).
    """
    ts, ds, vs, fs = [], [], [], []
    for sol in solutions:
        dist = sol.graph.distances_from(sol.source_point) if dist_fn is None else dist_fn(sol)
        inner = sol.graph.interior
        for i, t in enumerate(sol.times):
            if t <= 0:
                continue
            budget = resolution * (sol.omitted[i] + sol.leaked[i])
            ts.append(np.full(inner.sum(), t))
            ds.append(dist[inner])
            vs.append(sol.q[i, inner])
            fs.append(budget / sol.measure[inner])
    if not ts:
        raise InvalidInputError("kernel grid is empty")
    return KernelRecords(*(np.concatenate(a) for a in (ts, ds, vs, fs)))


@dataclass
class FitResult:
    constants: BoundConstants | None
    holds: bool
    worst_margin: float
    worst_point: dict
    regime_counts: dict
    c3_max: float | None = None
    sensitivity: dict = dc_field(default_factory=dict)
    skipped: int = 0

    def verdict(self) -> dict:
        c = self.constants
        return {
            "c1": None if c is None else c.c1,
            "c2": None if c is None else c.c2,
            "c3": None if c is None else c.c3,
            "c4": None if c is None else c.c4,
            "worst_margin": self.worst_margin,
            "regime_counts": self.regime_counts,
        }


def _fit_fixed(rec: KernelRecords, d: int, c1: float, c3: float):
    """Smallest c2 for the given (c1, c3), then the largest admissible c4."""
    gauss = rec.dist <= c1 * rec.t
    tpow = rec.t ** (d / 2)
    scaled = rec.value * tpow  # value * t^{d/2}
    c2 = 0.0
    if gauss.any():
        c2 = float((scaled[gauss] * np.exp(c3 * rec.dist[gauss] ** 2 / rec.t[gauss])).max())
    sub = ~gauss
    if sub.any():
        c2 = max(c2, float(scaled[sub].max()))
    c4 = math.inf
    if sub.any():
        ratio = (rec.value[sub] / c2) * tpow[sub]
        rate = rec.dist[sub] * np.maximum(1.0, np.log(rec.dist[sub] / rec.t[sub]))
        c4 = float((-np.log(ratio) / rate).min())
    return c2, c4, gauss


def fit_constants(records: KernelRecords, d: int = 2, *, c1: float = 1.0, c3: float | None = None,
                  c2_cap: float = 10.0) -> FitResult:
    """Fit the two-regime bound to kernel records.

    With ``c3`` given, c2 is the smallest value making the Gaussian branch hold
    at every point with dist <= c1 t, and c4 the largest rate making the other
    branch hold.  Without ``c3``, the largest c3 with c2 <= ``c2_cap`` is used.
    """
    skipped = int((records.value <= records.floor).sum())
    rec = records.resolved()
    if len(rec) == 0:
        raise InvalidInputError("no resolved kernel values to fit")
    c3_max = _max_c3(rec, d, c1, c2_cap)
    if c3 is None:
        c3 = c3_max
    if not (c3 and c3 > 0):
        return FitResult(None, False, -math.inf, {}, {}, c3_max, skipped=skipped)
    c2, c4, gauss = _fit_fixed(rec, d, c1, c3)
    counts = {"gaussian": int(gauss.sum()), "subgaussian": int((~gauss).sum())}
    c4_report = c4 if math.isfinite(c4) else None
    worst, point = _worst_margin(rec, d, c1, c2, c3, c4 if c4_report is not None else 1.0)
    # the fitted constants are tight, so the worst log-margin is zero up to rounding
    holds = c2 > 0 and c2 <= c2_cap and (c4_report is None or c4 > 0) and worst >= -MARGIN_ATOL
    consts = BoundConstants(c1, c2, c3, c4 if c4_report is not None and c4 > 0 else math.inf) \
        if holds else None
    sens = {}
    for alt in (0.5, 1.0, 2.0):
        a2, a4, _ = _fit_fixed(rec, d, alt, c3)
        sens[str(alt)] = {"c2": a2, "c4": a4 if math.isfinite(a4) else None}
    return FitResult(consts, holds, worst, point, counts, c3_max, sens, skipped)


def _max_c3(rec: KernelRecords, d: int, c1: float, cap: float) -> float | None:
    # c2(c3) is increasing in c3, so bisect on the cap
    c2_at = lambda c: _fit_fixed(rec, d, c1, c)[0]  # noqa: E731
    if c2_at(0.0) > cap:
        return None
    lo, hi = 0.0, 1.0
    while c2_at(hi) <= cap and hi < 1e6:
        lo, hi = hi, 2 * hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if c2_at(mid) <= cap else (lo, mid)
    return lo


def _worst_margin(rec, d, c1, c2, c3, c4):
    """Smallest log(bound / value) across the records, with its location."""
    gauss = rec.dist <= c1 * rec.t
    log_pre = math.log(c2) - d / 2 * np.log(rec.t)
    rate = rec.dist * np.maximum(1.0, np.log(np.maximum(rec.dist, 1e-300) / rec.t))
    log_bound = np.where(gauss, log_pre - c3 * rec.dist**2 / rec.t, log_pre - c4 * rate)
    margin = log_bound - np.log(rec.value)
    i = int(np.argmin(margin))
    point = {"t": float(rec.t[i]), "dist": float(rec.dist[i]), "value": float(rec.value[i]),
             "regime": "gaussian" if gauss[i] else "subgaussian"}
    return float(margin[i]), point


def envelope_constant(rec: KernelRecords, d: int, gamma: float) -> float:
    """Smallest c with value <= envelope(c) on the near-diagonal points dist <= sqrt(t)."""
    near = rec.dist <= np.sqrt(rec.t)
    if not near.any():
        raise InvalidInputError("no near-diagonal points")
    log_env = log_envelope(rec.t[near], rec.dist[near], d, gamma)
    return float(np.exp((np.log(rec.value[near]) - log_env).max()))


def envelope_margins(rec: KernelRecords, d: int, gamma: float, c: float) -> np.ndarray:
    """log(envelope / value) at every record."""
    return log_envelope(rec.t, rec.dist, d, gamma, c) - np.log(rec.value)
