"""Numerical verifiers for the identities and inequalities behind the heat kernel bounds.

Every check returns a :class:`CheckResult`. Margins are signed so that a
negative ``worst_margin`` means a violation, and each violation can be replayed
from ``witness_seed`` and ``witness_instance``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from .davies import a_phi, h_phi, h_tilde, sharp_rate
from .environments import EnvironmentSpec, _ball_size, generate, kappa_gamma
from .errors import InvalidInputError
from .graph import (ConductanceField, LatticeGraph, averaged_norm, dirichlet_form, edge_average,
                    gradient)
from .heat import DEFAULT_TOL, GeneratorOperator, build_generator, evolve

C1_CEILING = 200.0
DENSE_LIMIT = 500


@dataclass
class CheckResult:
    name: str
    trials: int
    violations: int
    worst_margin: float
    witness_seed: int | None = None
    witness_instance: int | None = None
    fitted_constant: float | None = None
    details: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x

        return {
            "name": self.name,
            "trials": self.trials,
            "violations": self.violations,
            "worst_margin": clean(float(self.worst_margin)),
            "witness_seed": self.witness_seed,
            "witness_instance": self.witness_instance,
            "fitted_constant": clean(None if self.fitted_constant is None else float(self.fitted_constant)),
        }


def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


class _Tally:
    """Running worst margin over trials."""

    def __init__(self, name: str, seed: int):
        self.name, self.seed = name, seed
        self.trials = self.violations = 0
        self.worst, self.where = math.inf, None

    def add(self, margin: float, instance: int, bad: bool | None = None):
        self.trials += 1
        if bad if bad is not None else margin < 0:
            self.violations += 1
        if margin < self.worst:
            self.worst, self.where = float(margin), instance

    def result(self, fitted=None, **details) -> CheckResult:
        witness = self.where if self.violations or self.where is not None else None
        return CheckResult(self.name, self.trials, self.violations, self.worst,
                           self.seed if witness is not None else None, witness, fitted, details)


def _random_ball(rng: np.random.Generator) -> LatticeGraph:
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, {1: 8, 2: 6, 3: 4}[d]))
    return LatticeGraph.ball(d, n)


def _mixed_scale(rng, size):
    return rng.standard_normal(size) * 10.0 ** rng.uniform(-3, 3, size)


# -- discrete calculus ----------------------------------------------------------------

def check_product_rule(trials: int = 200, seed: int = 0, rtol: float = 1e-12) -> CheckResult:
    """grad(fg) = <g> grad f + <f> grad g on every edge."""
    if trials < 1:
        raise InvalidInputError("trials must be positive")
    tally = _Tally("product_rule", seed)
    for i in range(trials):
        rng = _rng(seed, i)
        g = _random_ball(rng)
        f, h = _mixed_scale(rng, g.num_vertices), _mixed_scale(rng, g.num_vertices)
        lhs = gradient(f * h, g)
        a, b = edge_average(h, g) * gradient(f, g), edge_average(f, g) * gradient(h, g)
        fh = np.abs(f * h)
        scale = fh[g.plus] + fh[g.minus] + np.abs(a) + np.abs(b) + 1e-300
        tally.add(float((rtol - np.abs(lhs - a - b) / scale).min(initial=rtol)), i)
    return tally.result()


def check_phi_identities(trials: int = 200, seed: int = 0, rtol: float = 1e-12) -> CheckResult:
    """Edgewise identities for phi = exp(psi) and its reciprocal."""
    tally = _Tally("phi_identities", seed)
    for i in range(trials):
        rng = _rng(seed, i)
        g = _random_ball(rng)
        psi = rng.standard_normal(g.num_vertices) * rng.uniform(0, 5)
        omega = np.exp(rng.standard_normal(g.num_edges) * 2)
        phi, inv = np.exp(psi), np.exp(-psi)
        r = phi[g.plus] / phi[g.minus]
        left = edge_average(inv, g) * gradient(phi, g)
        right = -edge_average(phi, g) * gradient(inv, g)
        # gradients cancel when r is near 1, so measure error against the endpoint sizes
        size = edge_average(inv, g) * edge_average(phi, g)
        m1 = rtol - np.abs(left - right) / size
        quarter = 0.25 * (r + 1 / r + 2)
        m2 = rtol - np.abs(size - quarter) / quarter
        m3 = (size - 1.0) / size + rtol
        gamma = omega * gradient(phi, g) * gradient(inv, g)
        m4 = -gamma / (omega * size) + rtol
        tally.add(float(min(m.min(initial=rtol) for m in (m1, m2, m3, m4))), i)
    return tally.result()


# -- elementary inequalities ----------------------------------------------------------

def _pow_diff(a: np.ndarray, b: np.ndarray, k) -> np.ndarray:
    """a^k - b^k for a, b >= 0, accurate when a and b are close."""
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    sign = np.where(a >= b, 1.0, -1.0)
    near = (lo > 0) & (hi - lo < lo)
    safe = np.where(near, lo, 1.0)
    close = safe ** k * np.expm1(k * np.log1p(np.where(near, hi - lo, 0.0) / safe))
    return sign * np.where(near, close, hi ** k - lo ** k)


def chain_rule_margins(a, b, alpha1, alpha2, alpha3) -> np.ndarray:
    """Relative margins (rhs - lhs) / max(|lhs|, |rhs|) of the three elementary inequalities.

    Returns an array of shape (3, n); entries where both sides vanish are 0.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    alpha1, alpha2, alpha3 = (np.asarray(x, float) for x in (alpha1, alpha2, alpha3))
    out = []
    lhs1 = _pow_diff(a, b, alpha1) ** 2
    rhs1 = alpha1 ** 2 / (2 * alpha1 - 1) * (a - b) * _pow_diff(a, b, 2 * alpha1 - 1)
    out.append((lhs1, rhs1))
    lhs2 = a * b * np.abs(_pow_diff(a, b, 2 * alpha2 - 2))
    rhs2 = (alpha2 - 1) / alpha2 * np.abs(_pow_diff(a, b, 2 * alpha2))
    out.append((lhs2, rhs2))
    lhs3 = (a ** (2 * alpha3 - 1) + b ** (2 * alpha3 - 1)) * np.abs(a - b)
    rhs3 = 4 * np.abs(_pow_diff(a, b, alpha3)) * (a ** alpha3 + b ** alpha3)
    out.append((lhs3, rhs3))
    margins = []
    for lhs, rhs in out:
        scale = np.maximum(np.abs(lhs), np.abs(rhs))
        with np.errstate(invalid="ignore", divide="ignore"):
            margins.append(np.where(scale > 0, (rhs - lhs) / scale, 0.0))
    return np.array(margins)


def sample_chain_triples(n: int, seed: int = 0, alpha_max: float = 8.0):
    """(a, b, alpha1, alpha2, alpha3) over 12 decades, with ties, zeros and near-ties mixed in."""
    rng = _rng(seed, 0xC4A1)
    a = 10.0 ** rng.uniform(-6, 6, n)
    b = 10.0 ** rng.uniform(-6, 6, n)
    kind = rng.integers(0, 20, n)
    b = np.where(kind == 0, a, b)
    b = np.where(kind == 1, a * (1 + 10.0 ** rng.uniform(-12, -2, n)), b)
    a = np.where(kind == 2, 0.0, a)
    b = np.where(kind == 3, 0.0, b)
    alpha1 = 0.5 + (alpha_max - 0.5) * rng.uniform(0, 1, n) ** 3
    alpha1 = np.where(alpha1 <= 0.5, 0.5 + 1e-9, alpha1)
    alpha2 = 1 + (alpha_max - 1) * rng.uniform(0, 1, n) ** 3
    alpha3 = 0.5 + (alpha_max - 0.5) * rng.uniform(0, 1, n) ** 3
    edge = kind == 4
    alpha2 = np.where(edge, 1.0, alpha2)
    alpha3 = np.where(edge, 0.5, alpha3)
    return a, b, alpha1, alpha2, alpha3


def check_chain_rules(trials: int = 100_000, seed: int = 0, rtol: float = 1e-12) -> CheckResult:
    """Sampled verification of the three power-function inequalities."""
    a, b, *alphas = sample_chain_triples(trials, seed)
    m = chain_rule_margins(a, b, *alphas)
    worst_each = m.min(axis=1)
    bad = (m < -rtol).any(axis=0)
    flat = m.min(axis=0)
    i = int(np.argmin(flat))
    return CheckResult("chain_rules", trials, int(bad.sum()), float(flat[i]), seed, i, None,
                       {"worst_by_inequality": [float(w) for w in worst_each],
                        "witness": {"a": float(a[i]), "b": float(b[i]),
                                    "alpha": [float(x[i]) for x in alphas]}})


# -- perturbed generator ----------------------------------------------------------------

def _perturbed_forms(psi, field: ConductanceField, walk: str):
    """Symmetric quadratic-form matrix of -L_phi on the interior and the measure weights."""
    gen = build_generator(field, walk)
    inner, R, exit_, _ = gen.dirichlet()
    psi = np.asarray(getattr(psi, "psi", psi), dtype=np.float64)
    phi = np.exp(psi[inner])
    w = gen.weight[inner]
    L = (R - sp.diags(exit_)).tocsr()
    K = -(sp.diags(w * phi) @ L @ sp.diags(1.0 / phi))
    return gen, inner, ((K + K.T) * 0.5).tocsr(), w


def _h_for(psi, field: ConductanceField, walk: str) -> float:
    return h_phi(psi, field.graph) if walk.upper() == "CSRW" else h_tilde(psi, field)


def min_rayleigh(psi, field: ConductanceField, walk: str = "CSRW", method: str = "dense",
                 iters: int = 200_000, tol: float = 1e-13) -> float:
    """Smallest <g, -L_phi g> / ||g||^2 over g vanishing on the boundary."""
    _, _, K, w = _perturbed_forms(psi, field, walk)
    s = 1.0 / np.sqrt(w)
    S = sp.diags(s) @ K @ sp.diags(s)
    if method == "dense":
        if S.shape[0] > DENSE_LIMIT:
            raise InvalidInputError(f"dense eigensolve is limited to {DENSE_LIMIT} vertices")
        return float(sla.eigh(S.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0])
    if method == "lanczos":
        return float(eigsh(S.tocsc(), k=1, which="SA")[0][0])
    if method != "power":
        raise InvalidInputError(f"unknown method {method!r}")
    # power iteration on sigma I - S, whose top eigenvalue is sigma - min spec(S)
    sigma = float(np.abs(S).sum(axis=1).max())
    x = np.ones(S.shape[0]) / math.sqrt(S.shape[0])
    est = math.inf
    for _ in range(iters):
        y = sigma * x - S @ x
        new = float(x @ y)
        x = y / np.linalg.norm(y)
        if abs(new - est) <= tol * max(1.0, abs(new)):
            est = new
            break
        est = new
    return sigma - est


def check_spectral_bound(psi, field: ConductanceField, trials: int = 1000, seed: int = 0, *,
                         walk: str = "CSRW", atol: float = 1e-10) -> CheckResult:
    """<g, -L_phi g> >= -h ||g||^2 for random g and, on small balls, the exact minimum."""
    walk = walk.upper()
    _, inner, K, w = _perturbed_forms(psi, field, walk)
    h = _h_for(psi, field, walk)
    tally = _Tally("spectral_bound", seed)
    rng = _rng(seed, 0x5BEC)
    G = rng.standard_normal((trials, len(inner)))
    G *= rng.uniform(0, 1, G.shape) < rng.uniform(0.05, 1, (trials, 1))
    for i, g in enumerate(G):
        norm = float(g @ (w * g))
        if norm == 0:
            continue
        tally.add(float(g @ (K @ g)) / norm + h + atol, i)
    fitted = None
    if len(inner) <= DENSE_LIMIT:
        low = min_rayleigh(psi, field, walk, "dense")
        fitted = -low
        tally.add(low + h + atol, -1)
    return tally.result(fitted, h=h, sharp_rate=sharp_rate(psi, field, walk), walk=walk)


# -- a-priori estimate ------------------------------------------------------------------

def apriori_battery(psi, field: ConductanceField, x, y, walk: str = "CSRW") -> dict:
    """Initial data for the a-priori check: point masses at x and y, a small
    indicator around y, and the fastest-growing mode of phi P_t phi^-1."""
    g = field.graph
    out = {}
    for name, pt in (("delta_x", x), ("delta_y", y)):
        f = np.zeros(g.num_vertices)
        f[g.index(pt)] = 1.0
        out[name] = f
    near = g.distances_from(y) <= 2
    out["ball_y"] = (near & g.interior).astype(float)
    _, inner, K, w = _perturbed_forms(psi, field, walk)
    s = 1.0 / np.sqrt(w)
    S = sp.diags(s) @ K @ sp.diags(s)
    vec = eigsh(S.tocsc(), k=1, which="SA")[1][:, 0] * s
    phi = np.exp(np.asarray(getattr(psi, "psi", psi))[inner])
    mode = np.zeros(g.num_vertices)
    mode[inner] = vec / phi  # v = phi f is the extremal vector
    out["extremal"] = mode / np.abs(mode).max()
    return out


def check_apriori(psi, field: ConductanceField, f, T: float, *, walk: str = "CSRW", n_times: int = 64,
                  tol: float = DEFAULT_TOL, rate: float | None = None, seed: int = 0) -> CheckResult:
    """||phi u_t||_2 <= exp(h t) ||phi f||_2 at ``n_times`` equally spaced times in (0, T].

    The norm is in l^2(mu) with h = h(phi) for the CSRW, and in l^2 with
    h = h_tilde(phi) for the VSRW; ``rate`` overrides the exponent. A time counts
    as a violation when the left side exceeds the right by more than 10 tol
    relative to the right side.
    """
    walk = walk.upper()
    if not T > 0:
        raise InvalidInputError("T must be positive")
    gen = build_generator(field, walk)
    psi = np.asarray(getattr(psi, "psi", psi), dtype=np.float64)
    phi = np.exp(psi)
    f = np.asarray(f, dtype=np.float64)
    w = gen.weight
    h = _h_for(psi, field, walk) if rate is None else float(rate)
    times = np.linspace(0, T, n_times + 1)[1:]
    U = evolve(gen, f, times, tail=tol * 1e-3)
    f_inner = np.where(field.graph.interior, f, 0.0)
    base = math.sqrt(float(((phi * f_inner) ** 2 * w).sum()))
    if base == 0:
        raise InvalidInputError("f vanishes on the interior")
    lhs = np.sqrt((((phi * U) ** 2) * w).sum(axis=1))
    rhs = np.exp(h * times) * base
    margin = (rhs - lhs) / rhs
    tally = _Tally("apriori", seed)
    for i, m in enumerate(margin):
        tally.add(float(m), i, bad=m < -10 * tol)
    growth = float((np.log(lhs / base) / times).max())
    return tally.result(growth, h=h, sharp_rate=sharp_rate(psi, field, walk), walk=walk,
                        max_ratio=float((lhs / rhs).max()), worst_time=float(times[int(np.argmin(margin))]))


# -- energy estimate -------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    gen: GeneratorOperator
    f: np.ndarray
    times: np.ndarray
    u: np.ndarray


def trajectory(gen: GeneratorOperator, f, times, tail: float = 1e-13) -> Trajectory:
    times = np.asarray(times, dtype=np.float64)
    return Trajectory(gen, np.asarray(f, dtype=np.float64), times, evolve(gen, f, times, tail=tail))


def tent(g: LatticeGraph, x0, n: int):
    """Cut-off eta = (1 - |y - x0|_1 / n)^+ and the ball B(x0, n) that carries it."""
    dist = g.distances_from(x0)
    B = np.nonzero(dist <= n)[0]
    if len(B) != _ball_size(g.d, n):
        raise InvalidInputError("graph does not contain the tent's ball")
    return np.clip(1.0 - dist / n, 0.0, 1.0), B


def _energy_terms(field, phi, alpha, eta, B, u, Lu):
    mu = field.mu
    v = phi * u
    va = v ** alpha
    ddt = 2 * alpha * float((mu * eta**2 * v ** (2 * alpha - 1) * phi * Lu)[B].sum()) / len(B)
    energy = dirichlet_form(va, va, field, weight=eta) / len(B)
    norm = float((mu * va**2)[B].sum()) / len(B)
    return ddt, energy, norm


def check_energy_estimate(field: ConductanceField, psi, alpha: float, eta, traj: Trajectory, B, *,
                          c1: float = C1_CEILING, seed: int = 0, fd_step: float = 1e-3) -> CheckResult:
    """Pointwise-in-time energy inequality for v = phi u along a nonnegative CSRW trajectory.

    The time derivative of ||eta v^alpha||^2 is taken analytically from the
    equation; ``details['fd_error']`` compares it with central differences at
    steps h and h/2 at the middle grid time.
    """
    if alpha < 1:
        raise InvalidInputError("alpha must be at least 1")
    g = field.graph
    eta = np.asarray(eta, dtype=np.float64)
    B = np.asarray(B)
    inB = np.zeros(g.num_vertices, dtype=bool)
    inB[B] = True
    if eta.min() < 0 or eta.max() > 1 or np.any(eta[~inB] != 0):
        raise InvalidInputError("eta must take values in [0, 1] and vanish outside B")
    edge_out = inB[g.minus] != inB[g.plus]
    rim = np.unique(np.concatenate([g.minus[edge_out], g.plus[edge_out]]))
    if np.any(eta[rim[inB[rim]]] != 0):
        raise InvalidInputError("eta must vanish on the boundary of B")
    if traj.u.min() < -1e-12:
        raise InvalidInputError("the trajectory must be nonnegative")
    gen = traj.gen
    psi = np.asarray(getattr(psi, "psi", psi), dtype=np.float64)
    phi = np.exp(psi)
    A = a_phi(psi, g)
    grad_eta = float(np.abs(gradient(eta, g)).max(initial=0.0))
    scale = alpha**2 * A**2 * (1 + grad_eta**2)
    tally = _Tally("energy_estimate", seed)
    fitted = 0.0
    for i, u in enumerate(np.maximum(traj.u, 0.0)):
        ddt, energy, norm = _energy_terms(field, phi, alpha, eta, B, u, gen.apply_dirichlet(u))
        lhs = ddt + energy
        bound = c1 * scale * norm
        if bound <= 0:
            continue
        fitted = max(fitted, lhs / (scale * norm))
        tally.add((bound - lhs) / bound, i)
    details = {"A": A, "grad_eta": grad_eta, "alpha": alpha}
    mid = float(traj.times[len(traj.times) // 2])
    if mid > fd_step:
        details["fd_error"] = _fd_error(field, phi, alpha, eta, B, traj, mid, fd_step)
    return tally.result(fitted, **details)


def _fd_error(field, phi, alpha, eta, B, traj, t, step):
    mu = field.mu

    def norm_at(times):
        U = evolve(traj.gen, traj.f, times, tail=1e-15)
        return [float((mu * eta**2 * (phi * u) ** (2 * alpha))[B].sum()) / len(B) for u in U]

    u = evolve(traj.gen, traj.f, [t], tail=1e-15)[0]
    exact = _energy_terms(field, phi, alpha, eta, B, u, traj.gen.apply_dirichlet(u))[0]
    errs = []
    for h in (step, step / 2):
        lo, hi = norm_at([t - h, t + h])
        errs.append(abs((hi - lo) / (2 * h) - exact) / max(abs(exact), 1e-300))
    return errs


# -- maximal inequality ------------------------------------------------------------------

def check_maximal_inequality(field: ConductanceField, psi, n: int, theta: float, *, p: float, q: float,
                             x0=None, f=None, eps: float = 0.125, d_prime: float | None = None,
                             n_times: int = 32, seed: int = 0) -> CheckResult:
    """Implied constant C4 of the maximal inequality for v = phi P_t f on the cylinder
    [eps theta n^2 / 2, (1 - eps / 2) theta n^2] x B(x0, n / 2).

    ``f`` defaults to the indicator of B(x0, n).
    """
    if not 0 < theta < 1:
        raise InvalidInputError("theta must lie in (0, 1)")
    g = field.graph
    d = g.d
    x0 = tuple(g.center) if x0 is None else tuple(x0)
    kappa, _ = kappa_gamma(p, q, d, d if d_prime is None else d_prime)
    dist = g.distances_from(x0)
    Bn = np.nonzero(dist <= n)[0]
    if len(Bn) != _ball_size(d, n) or np.any(g.boundary[Bn]):
        raise InvalidInputError("graph must contain B(x0, n + 1)")
    f = (dist <= n).astype(float) if f is None else np.asarray(f, dtype=np.float64)
    psi = np.zeros(g.num_vertices) if psi is None else np.asarray(getattr(psi, "psi", psi), float)
    phi = np.exp(psi)
    h = h_phi(psi, g)
    T = theta * n * n
    times = np.linspace(eps * T / 2, (1 - eps / 2) * T, n_times)
    U = evolve(build_generator(field, "CSRW"), f, times)
    vmax = float((phi * U)[:, dist <= n / 2].max())
    m = max(1.0, averaged_norm(field.mu, p, Bn)) * max(1.0, averaged_norm(field.nu, q, Bn))
    norm = math.sqrt(float((field.mu * (phi * f) ** 2).sum()))
    scale = m ** (kappa + 1) * theta ** (-kappa) * math.exp(2 * h * (1 - eps) * T) * n ** (-d / 2) * norm
    c4 = vmax / scale
    tally = _Tally("maximal_inequality", seed)
    tally.add(0.0 if math.isfinite(c4) else -math.inf, n)
    return tally.result(c4, n=n, m=m, kappa=kappa, h=h, vmax=vmax)


def maximal_inequality_sweep(spec: EnvironmentSpec, ns=(8, 12, 16), theta: float = 0.5, *,
                             lam0: float = 0.0, p: float = 4.0, q: float = 4.0, d: int = 2,
                             factor: float = 2.0) -> CheckResult:
    """Implied C4 across radii n; a violation if max / min exceeds ``factor``.

    With ``lam0 > 0`` the potential is the min-potential towards x0 + n e1 with
    slope lam0 * 8 / n, which keeps h(phi) theta n^2 of order one.
    """
    from .davies import make_min_potential

    c4s, runs = [], []
    for n in ns:
        g = LatticeGraph.ball(d, n + 8 * math.ceil(math.sqrt(theta) * n) + 10)
        field = generate(spec, g)
        x0 = (0,) * d
        psi = None
        if lam0 > 0:
            psi = make_min_potential(field, x0, (n,) + (0,) * (d - 1), lam0 * 8 / n).psi
        res = check_maximal_inequality(field, psi, n, theta, p=p, q=q, x0=x0)
        c4s.append(res.fitted_constant)
        runs.append(res.details)
    spread = max(c4s) / min(c4s)
    tally = _Tally("maximal_inequality", spec.seed)
    tally.add(math.log(factor) - math.log(spread), int(np.argmax(c4s)))
    return tally.result(max(c4s), c4=c4s, ns=list(ns), spread=spread, kind=spec.kind, lam0=lam0)


# -- functional inequalities on Z^d ----------------------------------------------------------

def _ball_in(g: LatticeGraph, x, n: int) -> np.ndarray:
    dist = g.distances_from(x)
    inside = dist <= n
    if inside.sum() != _ball_size(g.d, n) or np.any(g.boundary[inside]):
        raise InvalidInputError(f"graph does not contain B(x, {n + 1})")
    return inside


def sobolev_ratio(g: LatticeGraph, x, n: int, u, d_prime: float | None = None) -> float:
    """||u||_{d'/(d'-1)} / (n^{1-d/d'} sum |grad u|) over B(x, n).

    ``u`` must vanish outside B(x, n - 1): a function that is nonzero on the
    outer sphere of the ball is rejected.
    """
    dp = g.d if d_prime is None else d_prime
    u = np.asarray(u, dtype=np.float64)
    inside = _ball_in(g, x, n)
    if np.any(u[g.distances_from(x) >= n] != 0):
        raise InvalidInputError("u must be supported in B(x, n - 1)")
    if not np.any(u):
        raise InvalidInputError("u vanishes identically")
    s = dp / (dp - 1) if dp > 1 else math.inf
    lhs = np.abs(u[inside]).max() if math.isinf(s) else float((np.abs(u[inside]) ** s).sum() ** (1 / s))
    touches = inside[g.minus] | inside[g.plus]
    grad = float(np.abs(gradient(u, g))[touches].sum())
    return lhs / (n ** (1 - g.d / dp) * grad)


def _sobolev_family(g: LatticeGraph, x, n: int, rng: np.random.Generator):
    dist = g.distances_from(x)
    interior = dist <= n - 1
    pts = np.nonzero(interior)[0]
    yield "delta_center", (dist == 0).astype(float)
    for k in range(3):
        u = np.zeros(g.num_vertices)
        u[rng.choice(pts)] = 1.0
        yield "delta", u
    for r in sorted({1, max(1, n // 4), max(1, n // 2), n - 1}):
        yield f"ball_{r}", (dist <= r).astype(float)
        c = g.coords[rng.choice(pts)]
        dc = np.abs(g.coords - c).sum(axis=1)
        yield f"offball_{r}", ((dc <= r) & interior).astype(float)
        yield f"tent_{r}", np.where(interior, np.maximum(0.0, r - dist), 0.0)
    half = max(1, (n - 1) // 2)
    box = np.all(np.abs(g.coords - np.asarray(x)) <= half // max(1, g.d - 1), axis=1) & interior
    yield "box", box.astype(float)
    for k in range(4):
        u = np.zeros(g.num_vertices)
        chosen = rng.choice(pts, size=min(len(pts), int(rng.integers(2, 12))), replace=False)
        u[chosen] = rng.uniform(0.1, 1.0, len(chosen))
        yield "sparse", u


def check_sobolev(g: LatticeGraph, n_list, family=None, seed: int = 0, *, x=None,
                  d_prime: float | None = None, factor: float = 3.0) -> CheckResult:
    """Fitted Sobolev constant C(n) over a test family; violation if max C / min C > factor.

    ``family(g, x, n, rng)`` may yield ``(label, u)`` pairs to replace the default.
    """
    x = tuple(g.center) if x is None else tuple(x)
    make = _sobolev_family if family is None else family
    fitted, labels = [], []
    for n in n_list:
        rng = _rng(seed, n)
        best, label = 0.0, None
        for name, u in make(g, x, n, rng):
            ratio = sobolev_ratio(g, x, n, u, d_prime)
            if ratio > best:
                best, label = ratio, name
        fitted.append(best)
        labels.append(label)
    spread = max(fitted) / min(fitted)
    tally = _Tally("sobolev", seed)
    tally.add(math.log(factor / spread), int(np.argmax(fitted)))
    return tally.result(max(fitted), per_n=dict(zip(map(int, n_list), fitted)), argmax=labels,
                        spread=spread)


def _cluster(g: LatticeGraph, inside: np.ndarray, start: int, size: int, rng) -> np.ndarray:
    member = np.zeros(g.num_vertices, dtype=bool)
    member[start] = True
    frontier = [start]
    count = 1
    while count < size and frontier:
        j = int(rng.integers(len(frontier)))
        v = frontier[j]
        nb = [w for w in g.neighbors[v] if w >= 0 and inside[w] and not member[w]]
        if not nb:
            frontier[j] = frontier[-1]
            frontier.pop()
            continue
        w = int(rng.choice(nb))
        member[w] = True
        frontier.append(w)
        count += 1
    return member


def boundary_size(g: LatticeGraph, A: np.ndarray, inside: np.ndarray) -> int:
    """Number of edges joining A to the rest of the ball."""
    a_m, a_p = A[g.minus], A[g.plus]
    both = inside[g.minus] & inside[g.plus]
    return int(((a_m != a_p) & both).sum())


def check_isoperimetric(g: LatticeGraph, n_list, seed: int = 0, *, x=None, d_prime: float | None = None,
                        clusters: int = 50, factor: float = 3.0) -> CheckResult:
    """Fitted relative isoperimetric constant C(n) = min |dA| n^{1-d/d'} |A|^{1/d' - 1}."""
    x = tuple(g.center) if x is None else tuple(x)
    dp = g.d if d_prime is None else d_prime
    fitted = []
    for n in n_list:
        rng = _rng(seed, n)
        inside = _ball_in(g, x, n)
        dist = g.distances_from(x)
        vol = int(inside.sum())
        sets = [inside & (dist <= r) for r in range(0, n)]
        sets += [inside & (g.coords[:, 0] - x[0] <= c) for c in range(-n, 1)]
        pts = np.nonzero(inside)[0]
        for _ in range(clusters):
            sets.append(_cluster(g, inside, int(rng.choice(pts)), int(rng.integers(1, vol // 2)), rng))
        best = math.inf
        for A in sets:
            size = int(A.sum())
            if size == 0 or size >= vol / 2:
                continue
            best = min(best, boundary_size(g, A, inside) * n ** (1 - g.d / dp) * size ** (1 / dp - 1))
        fitted.append(best)
    spread = max(fitted) / min(fitted)
    tally = _Tally("isoperimetric", seed)
    ok = min(fitted) > 0
    tally.add(math.log(factor / spread) if ok else -math.inf, int(np.argmin(fitted)))
    return tally.result(min(fitted), per_n=dict(zip(map(int, n_list), fitted)), spread=spread)


def nash_ratio(field: ConductanceField, f, d_prime: float | None = None) -> float:
    """(sum f^2)^{1 + 2/d'} / (sum_{x,y} omega (f(x) - f(y))^2 (sum |f|)^{4/d'}).

    The energy sums over ordered pairs, so each edge counts twice.
    """
    g = field.graph
    dp = g.d if d_prime is None else d_prime
    f = np.asarray(f, dtype=np.float64)
    if np.any(f[g.boundary] != 0):
        raise InvalidInputError("f must vanish on the boundary of the ball")
    energy = 2.0 * dirichlet_form(f, f, field)
    return float((f @ f) ** (1 + 2 / dp) / (energy * np.abs(f).sum() ** (4 / dp)))


def check_nash(field: ConductanceField, trials: int = 200, seed: int = 0, *,
               d_prime: float | None = None) -> CheckResult:
    """Largest Nash ratio over a test family; diagnostic only, never a violation."""
    g = field.graph
    inner = np.nonzero(g.interior)[0]
    tally = _Tally("nash", seed)
    best, label = 0.0, None
    for i in range(trials):
        rng = _rng(seed, i)
        kind = i % 4
        c = g.coords[rng.choice(inner)]
        dc = np.abs(g.coords - c).sum(axis=1)
        if kind == 0:
            f = (dc == 0).astype(float)
        elif kind == 1:
            f = ((dc <= rng.integers(1, 6)) & g.interior).astype(float)
        elif kind == 2:
            f = np.where(g.interior, np.maximum(0.0, rng.integers(2, 8) - dc), 0.0)
        else:
            f = np.zeros(g.num_vertices)
            pick = rng.choice(inner, size=min(len(inner), int(rng.integers(2, 20))), replace=False)
            f[pick] = rng.standard_normal(len(pick))
        if not np.any(f):
            continue
        r = nash_ratio(field, f, d_prime)
        if r > best:
            best, label = r, i
        tally.add(0.0, i)
    return tally.result(best, argmax=label)


def check_volume_regularity(g, n_list, C: float | None = None) -> CheckResult:
    """C^-1 n^d <= |B(x, n)| <= C n^d, with C = 3^d by default.

    ``g`` is a dimension or a graph containing the balls around its centre.
    """
    if isinstance(g, LatticeGraph):
        d = g.d
        sizes = [int(_ball_in(g, tuple(g.center), n).sum()) for n in n_list]
    else:
        d = int(g)
        sizes = [_ball_size(d, n) for n in n_list]
    C = 3.0**d if C is None else C
    tally = _Tally("volume_regularity", 0)
    for n, size in zip(n_list, sizes):
        lo, hi = n**d / C, C * n**d
        tally.add(min(math.log(size / lo), math.log(hi / size)), int(n))
    return tally.result(max(max(s / n**d, n**d / s) for n, s in zip(n_list, sizes)),
                        sizes=dict(zip(map(int, n_list), sizes)))


def standard_environment_matrix(seed: int = 0) -> list[tuple[str, EnvironmentSpec]]:
    return [
        ("omega_1", EnvironmentSpec("uniform_elliptic", seed)),
        ("pareto_3", EnvironmentSpec("iid_pareto", seed, alpha=3.0)),
        ("layered_2", EnvironmentSpec("layered", seed, alpha=2.0)),
    ]
