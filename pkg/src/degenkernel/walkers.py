"""Monte Carlo simulation of the constant and variable speed walks.

Single paths draw from a caller-supplied generator. Ensembles split the walkers
into fixed-size batches, each with its own Philox stream keyed by
``(seed, stream tag, batch index)``, so the result does not depend on how many
worker processes run the batches.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import InvalidInputError
from .graph import ConductanceField

BATCH = 1 << 16
CENSOR_WARN = 0.05
MODES = ("direct", "time_change")
_TAGS = {("CSRW", "direct"): 1, ("VSRW", "direct"): 2, ("CSRW", "time_change"): 3}


class CensoringWarning(UserWarning):
    """Too many walkers left the ball before the target time."""


def walker_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for walker ``index`` under ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return walker_rng(int(rng))


@dataclass(frozen=True)
class WalkPath:
    """Jump times (starting at 0) and the vertices occupied from each time on."""

    times: np.ndarray
    vertices: list
    walk: str
    mode: str
    horizon: float
    truncated: bool

    def position(self, t: float):
        """Vertex occupied at time t, or None if the walker was censored before t."""
        if not 0 <= t <= self.horizon:
            raise InvalidInputError("t outside the simulated horizon")
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if self.truncated and k == len(self.times) - 1:
            return None
        return self.vertices[k]

    @property
    def holding_times(self) -> np.ndarray:
        return np.diff(self.times)


def _start(field: ConductanceField, x0) -> int:
    g = field.graph
    i = g.index(x0)
    if not g.interior[i]:
        raise InvalidInputError(f"start {tuple(x0)} must be an interior vertex")
    return i


def _jump(field: ConductanceField, i: int, rng: np.random.Generator) -> int:
    w = field.neighbor_weights()[i]
    slot = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
    return int(field.graph.neighbors[i, min(slot, len(w) - 1)])


def _simulate(field: ConductanceField, x0, T: float, rng, walk: str, mode: str) -> WalkPath:
    if not T > 0:
        raise InvalidInputError("T must be positive")
    g = field.graph
    rng = _as_rng(rng)
    mu = field.mu
    i = _start(field, x0)
    times, path = [0.0], [i]
    clock = 0.0
    truncated = False
    while True:
        if walk == "CSRW" and mode == "direct":
            clock += rng.exponential(1.0)
        elif walk == "VSRW":
            clock += rng.exponential(1.0 / mu[i])
        else:
            # hold the variable speed walk, then advance the additive functional A
            clock += mu[i] * rng.exponential(1.0 / mu[i])
        if clock > T:
            break
        i = _jump(field, i, rng)
        times.append(clock)
        path.append(i)
        if not g.interior[i]:
            truncated = True
            break
    coords = [tuple(int(c) for c in g.coords[k]) for k in path]
    return WalkPath(np.array(times), coords, walk, mode, float(T), truncated)


def simulate_csrw(field: ConductanceField, x0, T: float, rng) -> WalkPath:
    """Exp(1) holding times and jumps to y with probability omega(x, y) / mu(x).

    The path stops, flagged ``truncated``, on reaching a boundary vertex.
    """
    return _simulate(field, x0, T, rng, "CSRW", "direct")


def simulate_vsrw(field: ConductanceField, x0, T: float, rng, mode: str = "direct") -> WalkPath:
    """Variable speed walk, or its time change.

    ``direct`` holds for Exp(mu(x)) at x. ``time_change`` runs the same walk X
    and returns Y_t = X at the inverse of A_t = int_0^t mu(X_s) ds, which has
    the constant speed law; the returned path is labelled accordingly.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    return _simulate(field, x0, T, rng, "VSRW" if mode == "direct" else "CSRW", mode)


# -- ensembles --------------------------------------------------------------------

def _batch_endpoints(args) -> np.ndarray:
    field, start, t, n, seed, tag, batch = args
    g = field.graph
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag, batch])))
    mu = field.mu
    weights = field.neighbor_weights()
    cum = np.cumsum(weights, axis=1)
    nbr = g.neighbors
    interior = g.interior
    pos = np.full(n, start, dtype=np.int64)
    clock = np.zeros(n)
    active = np.arange(n)
    while active.size:
        here = pos[active]
        if tag == _TAGS["CSRW", "direct"]:
            clock[active] += rng.exponential(1.0, active.size)
        elif tag == _TAGS["VSRW", "direct"]:
            clock[active] += rng.exponential(1.0 / mu[here])
        else:
            clock[active] += mu[here] * rng.exponential(1.0 / mu[here])
        moving = clock[active] <= t
        active = active[moving]
        here = here[moving]
        c = cum[here]
        u = rng.random(active.size) * c[:, -1]
        slot = np.minimum((c <= u[:, None]).sum(axis=1), c.shape[1] - 1)
        nxt = nbr[here, slot]
        pos[active] = nxt
        out = ~interior[nxt]
        pos[active[out]] = -1
        active = active[~out]
    return pos


def ensemble_endpoints(field: ConductanceField, x0, t: float, N: int, seed: int = 0, *,
                       walk: str = "CSRW", mode: str = "direct", jobs: int = 1) -> np.ndarray:
    """Vertex index of each of N walkers at time t; -1 marks censored walkers."""
    walk = walk.upper()
    if (walk, mode) not in _TAGS:
        raise InvalidInputError(f"unsupported walk/mode {walk}/{mode}")
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    start = _start(field, x0)
    sizes = [min(BATCH, N - b) for b in range(0, N, BATCH)]
    tasks = [(field, start, t, n, int(seed), _TAGS[walk, mode], b) for b, n in enumerate(sizes)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_batch_endpoints, tasks))
    else:
        parts = [_batch_endpoints(task) for task in tasks]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class EmpiricalKernel:
    t: float
    source: tuple
    freq: np.ndarray
    se: np.ndarray
    N: int
    censored: float
    counts: np.ndarray

    def z_scores(self, p: np.ndarray) -> np.ndarray:
        """(freq - p) / sqrt(p (1 - p) / N); the reference law supplies the variance."""
        p = np.asarray(p, dtype=np.float64)
        sd = np.sqrt(np.clip(p * (1 - p), 0.0, None) / self.N)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.freq - p) / sd
        return np.where(sd > 0, z, np.where(self.freq == p, 0.0, np.inf))


def mc_kernel_estimate(field: ConductanceField, x0, t: float, N: int, rng: int = 0, *,
                       walk: str = "CSRW", mode: str = "direct", jobs: int = 1) -> EmpiricalKernel:
    """Occupation frequencies at time t from N independent walkers."""
    if N < 1000:
        raise InvalidInputError("N must be at least 1000")
    g = field.graph
    ends = ensemble_endpoints(field, x0, t, N, rng, walk=walk, mode=mode, jobs=jobs)
    counts = np.bincount(ends[ends >= 0], minlength=g.num_vertices)
    freq = counts / N
    censored = float((ends < 0).mean())
    if censored > CENSOR_WARN:
        warnings.warn(f"{censored:.1%} of walkers were censored; the ball is too small for t={t}",
                      CensoringWarning, stacklevel=2)
    se = np.sqrt(freq * (1 - freq) / N)
    return EmpiricalKernel(float(t), tuple(int(c) for c in x0), freq, se, N, censored, counts)


def two_sample_chi2(counts_a, counts_b, min_expected: float = 5.0):
    """Pearson homogeneity test of two count vectors over the same cells.

    Cells whose expected count falls below ``min_expected`` in either sample
    are pooled into one cell. Returns ``(statistic, dof, p_value)``.
    """
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("count vectors differ in length")
    na, nb = a.sum(), b.sum()
    if na == 0 or nb == 0:
        raise InvalidInputError("both samples need positive counts")
    tot = a + b
    small = np.minimum(tot * na, tot * nb) / (na + nb) < min_expected
    table = np.stack([a[~small], b[~small]])
    if small.any():
        table = np.column_stack([table, [a[small].sum(), b[small].sum()]])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 0.0, 0, 1.0
    stat, pval, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), int(dof), float(pval)
