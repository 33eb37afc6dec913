"""Random conductance ensembles and moment diagnostics.

Every edge value is a deterministic function of the seed and the edge's
lattice coordinates, so a field does not depend on how the graph enumerates
its edges, and the same edge gets the same value in every enclosing ball.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _rng
from .errors import ConditionViolatedError, InvalidInputError
from .graph import ConductanceField, LatticeGraph, averaged_norm

KINDS = ("uniform_elliptic", "iid_pareto", "iid_polynomial_lower_tail", "layered")
_STREAM = {kind: i + 1 for i, kind in enumerate(KINDS)}


class MomentDivergenceWarning(UserWarning):
    """The requested moment of the conductance law is infinite."""


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: str
    seed: int = 0
    c: float = 1.0
    alpha: float = 2.0
    c_z: float = 1.0
    gamma_tail: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown environment kind {self.kind!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must fit in 64 bits")
        if self.kind == "uniform_elliptic" and not self.c >= 1:
            raise InvalidInputError("uniform_elliptic needs c >= 1")
        if self.kind in ("iid_pareto", "layered"):
            if not self.alpha > 1:
                raise InvalidInputError("alpha must exceed 1")
            if not self.c_z > 0:
                raise InvalidInputError("c_z must be positive")
        if self.kind == "iid_polynomial_lower_tail" and not self.gamma_tail > 0:
            raise InvalidInputError("gamma_tail must be positive")

    @property
    def u0(self) -> float:
        """Threshold above which the Pareto tail is exact: P[Z > u] = (c_z u)^-alpha."""
        return max(1.0, 1.0 / self.c_z)

    def with_seed(self, seed: int) -> "EnvironmentSpec":
        return EnvironmentSpec(self.kind, seed, self.c, self.alpha, self.c_z, self.gamma_tail)


def _pareto(u: np.ndarray, alpha: float, c_z: float) -> np.ndarray:
    return np.maximum(1.0, u ** (-1.0 / alpha) / c_z)


def layered_rows(spec: EnvironmentSpec, rows) -> np.ndarray:
    """Line conductances Z_k for the given e2-coordinates k."""
    if spec.kind != "layered":
        raise InvalidInputError("layered_rows needs a layered spec")
    rows = np.asarray(rows, dtype=np.int64)
    u = _rng.uniforms(spec.seed, _STREAM["layered"], rows)
    return _pareto(u, spec.alpha, spec.c_z)


def generate(spec: EnvironmentSpec, g: LatticeGraph) -> ConductanceField:
    """Sample the conductance field of ``spec`` on the graph ``g``."""
    low = g.coords[g.minus]
    keys = [low[:, i] for i in range(g.d)]
    stream = _STREAM[spec.kind]
    if spec.kind == "layered":
        if g.d < 2:
            raise InvalidInputError("layered fields need d >= 2")
        omega = np.ones(g.num_edges)
        horiz = g.axis == 0
        omega[horiz] = layered_rows(spec, low[horiz, 1])
        return ConductanceField(g, omega)
    u = _rng.uniforms(spec.seed, stream, g.axis, *keys)
    if spec.kind == "uniform_elliptic":
        omega = spec.c ** (2.0 * u - 1.0)
    elif spec.kind == "iid_pareto":
        omega = _pareto(u, spec.alpha, spec.c_z)
    else:
        omega = u ** (1.0 / spec.gamma_tail)
    return ConductanceField(g, omega)


# -- exponents -------------------------------------------------------------------

def _inv(x: float) -> float:
    return 0.0 if math.isinf(x) else 1.0 / x


@dataclass(frozen=True)
class ExponentCheck:
    holds: bool
    slack: float


def check_exponent_condition(p: float, q: float, d_prime: float, walk: str = "CSRW") -> ExponentCheck:
    """Moment-exponent condition for the constant speed (CSRW) or variable speed (VSRW) walk."""
    if not (p > 1 and q > 1):
        raise InvalidInputError("p and q must exceed 1")
    if d_prime < 2:
        raise InvalidInputError("d' must be at least 2")
    walk = walk.upper()
    if walk == "CSRW":
        used = _inv(p) + _inv(q)
    elif walk == "VSRW":
        used = _inv(p - 1) + _inv(q)
    else:
        raise InvalidInputError(f"unknown walk {walk!r}")
    slack = 2.0 / d_prime - used
    return ExponentCheck(slack > 0, slack)


def kappa_gamma(p: float, q: float, d: float, d_prime: float) -> tuple[float, float]:
    """Iteration exponent kappa and the polynomial correction gamma = 2 kappa - d/2."""
    denom = check_exponent_condition(p, q, d_prime, "CSRW").slack
    if denom <= 0:
        raise ConditionViolatedError(f"1/p + 1/q >= 2/d' for p={p}, q={q}, d'={d_prime}")
    kappa = 0.5 * (1.0 - _inv(p)) / denom
    return kappa, 2.0 * kappa - d / 2.0


def sobolev_rho(q: float, d: float, d_prime: float) -> float:
    """rho = q d / (q (d - 2) + d')."""
    if math.isinf(q):
        return d / (d - 2) if d > 2 else math.inf
    return q * d / (q * (d - 2) + d_prime)


def holder_conjugate(p: float) -> float:
    if math.isinf(p):
        return 1.0
    if p == 1:
        return math.inf
    return p / (p - 1)


def vsrw_alpha(k: int, p: float, q: float, d: float, d_prime: float) -> float:
    """Iteration exponent ((1 + 1/rho_*) / p_*)^k of the variable speed scheme."""
    if not check_exponent_condition(p, q, d_prime, "VSRW").holds:
        raise ConditionViolatedError("1/(p-1) + 1/q >= 2/d'")
    rho_star = holder_conjugate(sobolev_rho(q, d, d_prime))
    return ((1.0 + _inv(rho_star)) / holder_conjugate(p)) ** k


# -- moment diagnostics ------------------------------------------------------------

@dataclass
class MomentReport:
    p: float
    q: float
    x0: tuple
    radii: list
    mu_norms: list
    nu_norms: list
    stabilization_radius: int | None
    csrw_slack: float | None = None
    vsrw_slack: float | None = None
    flags: list = dc_field(default_factory=list)

    @property
    def stabilized(self) -> bool:
        return self.stabilization_radius is not None

    def rows(self):
        n0 = self.stabilization_radius
        for n, a, b in zip(self.radii, self.mu_norms, self.nu_norms):
            yield n, a, b, n0 is not None and n >= n0


def _stabilization(radii, *series) -> int | None:
    ok = np.ones(len(radii), dtype=bool)
    for s in series:
        s = np.asarray(s)
        ref = s[-1]
        ok &= (s >= ref / 2) & (s <= 2 * ref)
    if len(radii) == 1:
        return radii[0] if ok[0] else None
    # first index from which every later radius is within the band
    tail_ok = np.logical_and.accumulate(ok[::-1])[::-1]
    first = int(np.argmax(tail_ok)) if tail_ok.any() else len(radii)
    if first >= len(radii) - 1:
        return None  # only the reference radius itself qualifies
    return int(radii[first])


def moment_norms(field: ConductanceField, p: float, q: float, x0=None, radii=None,
                 env: EnvironmentSpec | None = None) -> MomentReport:
    """Averaged norms of mu (order p) and nu (order q) on balls B(x0, n).

    The field's graph must contain B(x0, max(radii) + 1) so that mu and nu are
    exact on every averaging ball.
    """
    g = field.graph
    x0 = tuple(g.center) if x0 is None else tuple(int(v) for v in x0)
    if not (p > 1 and q > 1):
        raise InvalidInputError("p and q must exceed 1")
    if radii is None:
        raise InvalidInputError("radii are required")
    radii = [int(r) for r in radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])) or radii[0] < 0:
        raise InvalidInputError("radii must be increasing and nonnegative")
    dist = g.distances_from(x0)
    need = g.subball(x0, radii[-1])
    if len(need) != _ball_size(g.d, radii[-1]) or np.any(g.boundary[need]):
        raise InvalidInputError("graph does not contain B(x0, max radius + 1)")
    mu_n, nu_n = [], []
    for r in radii:
        idx = np.nonzero(dist <= r)[0]
        mu_n.append(averaged_norm(field.mu, p, idx))
        nu_n.append(averaged_norm(field.nu, q, idx))
    report = MomentReport(p, q, x0, radii, mu_n, nu_n, _stabilization(radii, mu_n, nu_n))
    report.csrw_slack = check_exponent_condition(p, q, g.d, "CSRW").slack
    report.vsrw_slack = check_exponent_condition(p, q, g.d, "VSRW").slack
    if report.csrw_slack <= 0:
        report.flags.append("csrw condition fails")
    if report.vsrw_slack <= 0:
        report.flags.append("vsrw condition fails")
    if not report.stabilized:
        report.flags.append("not stabilized")
    if env is not None:
        for msg in divergent_moments(env, p, q):
            report.flags.append(msg)
            warnings.warn(msg, MomentDivergenceWarning, stacklevel=2)
    return report


def divergent_moments(env: EnvironmentSpec, p: float, q: float) -> list[str]:
    """Messages for moments of mu or nu that are infinite under ``env``."""
    out = []
    if env.kind in ("iid_pareto", "layered") and p >= env.alpha:
        out.append(f"moment divergent: E[mu^p] = inf for p={p} >= alpha={env.alpha}")
    if env.kind == "iid_polynomial_lower_tail" and q >= env.gamma_tail:
        out.append(f"moment divergent: E[nu^q] = inf for q={q} >= gamma_tail={env.gamma_tail}")
    return out


def _ball_size(d: int, n: int) -> int:
    # number of points of Z^d with |x|_1 <= n
    return sum(2**k * math.comb(d, k) * math.comb(n, k) for k in range(d + 1))
