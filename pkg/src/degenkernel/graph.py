"""Finite lattice graphs, conductance fields and discrete calculus.

Vertices of a graph are stored in lexicographic order, so vertex and edge
functions are flat float64 arrays indexed by position.  Every edge joins
``x`` and ``x + e_i`` and is oriented with ``plus`` at the lexicographically
larger endpoint ``x + e_i``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


class LatticeGraph:
    """Induced nearest-neighbour subgraph of Z^d on a finite vertex set.

    Use :meth:`ball` for the graph-metric ball B(x0, n) or :meth:`box` for an
    axis-aligned box.  Instances are treated as immutable.
    """

    def __init__(self, coords: np.ndarray, *, center=None, radius=None):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise InvalidInputError("coords must be a non-empty (N, d) array")
        self.d = coords.shape[1]
        if self.d < 1:
            raise InvalidInputError("dimension must be positive")
        self._lo = coords.min(axis=0)
        self._span = coords.max(axis=0) - self._lo + 3
        keys = self._encode(coords)
        order = np.argsort(keys, kind="stable")
        self.coords = coords[order]
        self.coords.setflags(write=False)
        self._keys = keys[order]
        if np.any(np.diff(self._keys) == 0):
            raise InvalidInputError("duplicate vertices")
        self.center = None if center is None else tuple(int(c) for c in center)
        self.radius = None if radius is None else int(radius)
        self._build_edges()

    # -- constructors -------------------------------------------------------
    @classmethod
    def ball(cls, d: int, n: int, x0=None) -> "LatticeGraph":
        """B(x0, n) in the graph (L1) metric of Z^d."""
        if d < 1 or n < 0:
            raise InvalidInputError(f"invalid ball parameters d={d}, n={n}")
        x0 = np.zeros(d, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64)
        if x0.shape != (d,):
            raise InvalidInputError("center has wrong dimension")
        axes = [np.arange(-n, n + 1)] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        grid = grid[np.abs(grid).sum(axis=1) <= n]
        return cls(grid + x0, center=x0, radius=n)

    @classmethod
    def box(cls, lo, hi) -> "LatticeGraph":
        """All lattice points with lo <= x <= hi componentwise."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise InvalidInputError("box corners are inconsistent")
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
        return cls(grid)

    # -- indexing -----------------------------------------------------------
    def _encode(self, pts: np.ndarray) -> np.ndarray:
        # shift by one so that neighbours of any vertex stay in range
        shifted = pts - self._lo + 1
        key = np.zeros(shifted.shape[:-1], dtype=np.int64)
        for i in range(self.d):
            key = key * self._span[i] + shifted[..., i]
        return key

    def index_of(self, pts) -> np.ndarray:
        """Vertex indices of lattice points; -1 for points outside the graph."""
        pts = np.asarray(pts, dtype=np.int64)
        if pts.shape[-1] != self.d:
            raise InvalidInputError("point has wrong dimension")
        inside = np.all((pts >= self._lo - 1) & (pts <= self._lo + self._span - 2), axis=-1)
        keys = self._encode(np.where(inside[..., None], pts, self._lo))
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        found = inside & (self._keys[pos] == keys)
        return np.where(found, pos, -1)

    def index(self, point) -> int:
        i = int(self.index_of(np.asarray(point)[None, :])[0])
        if i < 0:
            raise InvalidInputError(f"point {tuple(point)} is not a vertex")
        return i

    # -- edges --------------------------------------------------------------
    def _build_edges(self) -> None:
        n, d = len(self.coords), self.d
        nbr = np.full((n, 2 * d), -1, dtype=np.int64)
        plus, minus, axis = [], [], []
        for i in range(d):
            step = np.zeros(d, dtype=np.int64)
            step[i] = 1
            up = self.index_of(self.coords + step)
            down = self.index_of(self.coords - step)
            nbr[:, 2 * i] = up
            nbr[:, 2 * i + 1] = down
            src = np.nonzero(up >= 0)[0]
            minus.append(src)
            plus.append(up[src])
            axis.append(np.full(len(src), i, dtype=np.int64))
        self.minus = np.concatenate(minus)
        self.plus = np.concatenate(plus)
        self.axis = np.concatenate(axis)
        # canonical edge order: lexicographic in (minus, axis)
        order = np.lexsort((self.axis, self.minus))
        self.minus, self.plus, self.axis = self.minus[order], self.plus[order], self.axis[order]
        for arr in (self.minus, self.plus, self.axis):
            arr.setflags(write=False)
        self.neighbors = nbr
        self.neighbors.setflags(write=False)
        self.degree = (nbr >= 0).sum(axis=1)
        self.boundary = self.degree < 2 * d
        self.interior = ~self.boundary
        # edge id for each (vertex, slot); slot 2i is +e_i, 2i+1 is -e_i
        eid = np.full((n, 2 * d), -1, dtype=np.int64)
        ids = np.arange(len(self.minus))
        eid[self.minus, 2 * self.axis] = ids
        eid[self.plus, 2 * self.axis + 1] = ids
        self.neighbor_edges = eid
        self.neighbor_edges.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return len(self.coords)

    @property
    def num_edges(self) -> int:
        return len(self.minus)

    def __len__(self) -> int:
        return self.num_vertices

    def __repr__(self) -> str:
        shape = f"ball(x0={self.center}, n={self.radius})" if self.radius is not None else "box"
        return f"LatticeGraph(d={self.d}, {shape}, |V|={self.num_vertices})"

    def distances_from(self, point) -> np.ndarray:
        """Graph distance in Z^d (L1 norm); equals the intrinsic metric on balls and boxes."""
        p = np.asarray(point, dtype=np.int64)
        return np.abs(self.coords - p).sum(axis=1)

    def subball(self, x0, n: int) -> np.ndarray:
        """Indices of the vertices of B(x0, n) that lie in this graph."""
        return np.nonzero(self.distances_from(x0) <= n)[0]

    @cached_property
    def is_connected(self) -> bool:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        n = self.num_vertices
        adj = coo_matrix((np.ones(self.num_edges), (self.minus, self.plus)), shape=(n, n))
        return connected_components(adj, directed=False)[0] == 1


@dataclass(frozen=True, eq=False)
class ConductanceField:
    """Positive symmetric edge weights on a :class:`LatticeGraph`."""

    graph: LatticeGraph
    omega: np.ndarray

    def __post_init__(self):
        om = np.array(self.omega, dtype=np.float64)
        if om.shape != (self.graph.num_edges,):
            raise InvalidInputError("omega must have one entry per edge")
        if not np.all(np.isfinite(om)) or np.any(om <= 0):
            raise InvalidInputError("conductances must be finite and positive")
        om.setflags(write=False)
        object.__setattr__(self, "omega", om)

    def __call__(self, x, y) -> float:
        """omega(x, y) for lattice points x, y; 0 if they do not share an edge."""
        i, j = self.graph.index(x), self.graph.index(y)
        slots = np.nonzero(self.graph.neighbors[i] == j)[0]
        if len(slots) == 0:
            return 0.0
        return float(self.omega[self.graph.neighbor_edges[i, slots[0]]])

    def scaled(self, c: float) -> "ConductanceField":
        return ConductanceField(self.graph, self.omega * c)

    @cached_property
    def mu(self) -> np.ndarray:
        """Sum of incident conductances (exact at interior vertices)."""
        return _vertex_sum(self.graph, self.omega)

    @cached_property
    def nu(self) -> np.ndarray:
        """Sum of incident reciprocal conductances."""
        return _vertex_sum(self.graph, 1.0 / self.omega)

    def neighbor_weights(self) -> np.ndarray:
        """(N, 2d) table of conductances to each neighbour slot, 0 where absent."""
        eid = self.graph.neighbor_edges
        return np.where(eid >= 0, self.omega[np.maximum(eid, 0)], 0.0)


def _vertex_sum(g: LatticeGraph, w: np.ndarray) -> np.ndarray:
    out = np.bincount(g.plus, weights=w, minlength=g.num_vertices)
    out += np.bincount(g.minus, weights=w, minlength=g.num_vertices)
    return out


# -- discrete calculus ---------------------------------------------------------

def _check_vertex(f, g: LatticeGraph) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (g.num_vertices,):
        raise InvalidInputError(f"vertex function must have shape ({g.num_vertices},)")
    return f


def _check_edge(F, g: LatticeGraph) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (g.num_edges,):
        raise InvalidInputError(f"edge function must have shape ({g.num_edges},)")
    return F


def gradient(f, g: LatticeGraph) -> np.ndarray:
    f = _check_vertex(f, g)
    return f[g.plus] - f[g.minus]


def divergence(F, g: LatticeGraph) -> np.ndarray:
    """Adjoint of :func:`gradient` with respect to the counting measures."""
    F = _check_edge(F, g)
    out = np.bincount(g.plus, weights=F, minlength=g.num_vertices)
    out -= np.bincount(g.minus, weights=F, minlength=g.num_vertices)
    return out


def edge_average(f, g: LatticeGraph) -> np.ndarray:
    f = _check_vertex(f, g)
    return 0.5 * (f[g.plus] + f[g.minus])


def dirichlet_form(f, h, field: ConductanceField, weight=None) -> float:
    """Sum over edges of omega * grad f * grad h, optionally times <eta^2>."""
    g = field.graph
    w = field.omega
    if weight is not None:
        eta = _check_vertex(weight, g)
        w = w * edge_average(eta**2, g)
    return float(np.dot(w, gradient(f, g) * gradient(h, g)))


def averaged_norm(f, p: float, B=None, weight=None) -> float:
    """Space-averaged l^p norm of ``f`` over the index set ``B``.

    ``p = inf`` returns the maximum of |f| on B and ignores ``weight``.
    """
    f = np.asarray(f, dtype=np.float64)
    idx = np.arange(len(f)) if B is None else np.asarray(B)
    if idx.dtype == bool:
        idx = np.nonzero(idx)[0]
    if idx.size == 0:
        raise InvalidInputError("averaging set is empty")
    vals = np.abs(f[idx])
    if np.isinf(p):
        return float(vals.max())
    if p < 1:
        raise InvalidInputError("p must be >= 1")
    w = 1.0 if weight is None else np.asarray(weight, dtype=np.float64)[idx]
    return float(np.mean(w * vals**p) ** (1.0 / p))


# -- serialization -------------------------------------------------------------

def write_field(path, field: ConductanceField, seed: int = 0) -> None:
    """Write a ball field as text: header ``d n x0 seed`` then ``x y omega`` per edge."""
    g = field.graph
    if g.radius is None:
        raise InvalidInputError("only ball graphs can be serialized")
    fmt = lambda c: ",".join(str(int(v)) for v in c)  # noqa: E731
    lines = [f"{g.d} {g.radius} {fmt(g.center)} {int(seed)}"]
    for m, p, w in zip(g.minus, g.plus, field.omega):
        lines.append(f"{fmt(g.coords[m])} {fmt(g.coords[p])} {float(w)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_field(path) -> tuple[ConductanceField, int]:
    """Inverse of :func:`write_field`; returns ``(field, seed)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise InvalidInputError("malformed header")
        d, n = int(header[0]), int(header[1])
        x0 = [int(v) for v in header[2].split(",")]
        seed = int(header[3])
        g = LatticeGraph.ball(d, n, x0)
        omega = np.full(g.num_edges, np.nan)
        for line in fh:
            if not line.strip():
                continue
            a, b, w = line.split()
            ia = g.index([int(v) for v in a.split(",")])
            ib = g.index([int(v) for v in b.split(",")])
            slots = np.nonzero(g.neighbors[ia] == ib)[0]
            if len(slots) == 0:
                raise InvalidInputError(f"{a} and {b} are not adjacent")
            omega[g.neighbor_edges[ia, slots[0]]] = float(w)
    if np.isnan(omega).any():
        raise InvalidInputError("file does not cover every edge")
    return ConductanceField(g, omega), seed


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling file and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)

