"""Finite weighted graphs as metric measure Dirichlet spaces.

A :class:`WeightedGraph` carries symmetric edge conductances ``c_xy > 0``, a
vertex measure ``mu`` and the unit-length shortest-path metric.  Vertex
functions are plain ``numpy`` arrays of length ``G.n``; every norm and inner
product in this package is taken against ``mu``.

The discrete energy measure puts half of each edge's energy on each endpoint::

    Gamma(f, g)(x) = 1/2 * sum_y c_xy (f(x) - f(y)) (g(x) - g(y))

so that ``sum_x h(x) Gamma(f, f)(x) = E(f, f h) - E(f**2, h) / 2`` holds as an
algebraic identity for every ``h``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    BoundaryError,
    ConfigurationError,
    DomainError,
    DimensionError,
    InsufficientDataError,
)

MEASURES = ("degree", "counting")


class WeightedGraph:
    """Connected graph with positive conductances and a positive measure.

    Parameters
    ----------
    n : int
        Number of vertices, labelled ``0 .. n-1``.
    edges : array_like, shape (m, 2)
        Unordered vertex pairs; duplicates and loops are rejected.
    conductances : array_like, shape (m,), optional
        Defaults to unit conductances.
    mu : array_like or {"degree", "counting"}
        Vertex measure.  ``"degree"`` is ``mu(x) = sum_y c_xy``.
    coords : array_like, shape (n, 2), optional
        Planar embedding, only used for builders and plots.
    boundary : iterable of int, optional
        Truncation vertices.  Balls that contain one of them are rejected by
        the scaling fits and by annulus validation.
    """

    def __init__(self, n, edges, conductances=None, mu="degree", coords=None,
                 boundary=(), name="graph"):
        self.n = int(n)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if conductances is None:
            conductances = np.ones(len(edges))
        conductances = np.asarray(conductances, dtype=float).reshape(-1)
        if self.n < 1:
            raise ConfigurationError("graph needs at least one vertex")
        if len(conductances) != len(edges):
            raise DimensionError("one conductance per edge is required")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.n):
            raise ConfigurationError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ConfigurationError("self-loops are not allowed")
        if not np.all(conductances > 0) or not np.all(np.isfinite(conductances)):
            raise ConfigurationError("conductances must be finite and > 0")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        if len(np.unique(lo * self.n + hi)) != len(edges):
            raise ConfigurationError("duplicate edge")
        self.edge_u = lo
        self.edge_v = hi
        self.cond = conductances
        self.conductance = sparse.coo_matrix(
            (np.r_[conductances, conductances], (np.r_[lo, hi], np.r_[hi, lo])),
            shape=(self.n, self.n),
        ).tocsr()
        self.weighted_degree = np.asarray(self.conductance.sum(axis=1)).ravel()

        if isinstance(mu, str):
            if mu == "degree":
                mu = self.weighted_degree.copy()
            elif mu == "counting":
                mu = np.ones(self.n)
            else:
                raise ConfigurationError(f"unknown measure {mu!r}; expected one of {MEASURES}")
        mu = np.asarray(mu, dtype=float).reshape(-1)
        if mu.shape != (self.n,):
            raise DimensionError("mu must have one entry per vertex")
        if not np.all(mu > 0):
            raise ConfigurationError("vertex measure must be strictly positive")
        self.mu = mu
        self.coords = None if coords is None else np.asarray(coords, dtype=float)
        self.boundary = frozenset(int(b) for b in boundary)
        self.name = name

        ncomp, _ = csgraph.connected_components(self.conductance, directed=False)
        if ncomp != 1:
            raise ConfigurationError(f"graph is not connected ({ncomp} components)")

        self._dist_cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self._stiffness = None

    def __repr__(self):
        return f"WeightedGraph({self.name!r}, n={self.n}, m={self.num_edges})"

    @property
    def num_edges(self) -> int:
        return len(self.cond)

    @property
    def total_mass(self) -> float:
        return float(self.mu.sum())

    def with_measure(self, mu) -> "WeightedGraph":
        edges = np.c_[self.edge_u, self.edge_v]
        return WeightedGraph(self.n, edges, self.cond, mu, self.coords, self.boundary, self.name)

    # -- metric -----------------------------------------------------------
    def distances_from(self, x: int) -> np.ndarray:
        """Integer graph distances from ``x`` (unit edge lengths), cached."""
        x = self._check_vertex(x)
        cached = self._dist_cache.get(x)
        if cached is not None:
            return cached
        with self._lock:
            if x not in self._dist_cache:
                d = csgraph.shortest_path(self.conductance, directed=False,
                                          unweighted=True, indices=x)
                d = d.astype(np.int64)
                d.setflags(write=False)
                self._dist_cache[x] = d
            return self._dist_cache[x]

    def distance(self, x: int, y: int) -> int:
        return int(self.distances_from(x)[self._check_vertex(y)])

    def distance_to_set(self, x: int, targets: Iterable[int]) -> float:
        targets = list(targets)
        if not targets:
            return np.inf
        return float(self.distances_from(x)[targets].min())

    def eccentricity(self, x: int) -> int:
        return int(self.distances_from(x).max())

    def diameter(self) -> int:
        """Exact diameter (all-pairs BFS; fine at desk scale)."""
        if not hasattr(self, "_diameter"):
            d = csgraph.shortest_path(self.conductance, directed=False, unweighted=True)
            self._diameter = int(d.max())
        return self._diameter

    def _check_vertex(self, x) -> int:
        x = int(x)
        if not 0 <= x < self.n:
            raise KeyError(f"unknown vertex {x}")
        return x

    # -- operators ----------------------------------------------------------
    def stiffness(self) -> sparse.csr_matrix:
        """``K = D - C`` with ``<f, K g> = E(f, g)`` (plain Euclidean pairing)."""
        if self._stiffness is None:
            self._stiffness = (sparse.diags(self.weighted_degree) - self.conductance).tocsr()
        return self._stiffness

    def check_function(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n,):
            raise DimensionError(f"vertex function has shape {f.shape}, expected ({self.n},)")
        return f

    def norm(self, f, p: float = 2.0) -> float:
        return lp_norm(f, self.mu, p)


def lp_norm(f, mu, p: float = 2.0) -> float:
    """``(sum |f|^p mu)^(1/p)``, evaluated with max-scaling so large ``p`` is safe."""
    a = np.abs(np.asarray(f, dtype=float))
    if np.isinf(p):
        return float(a.max())
    m = a.max()
    if m == 0:
        return 0.0
    return float(m * np.sum((a / m) ** p * mu) ** (1.0 / p))


def signed_power(f, q: float) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.sign(f) * np.abs(f) ** q


def dirichlet_energy(G: WeightedGraph, f, g=None) -> float:
    """E(f, g) = 1/2 sum_{x,y} c_xy (f(x) - f(y)) (g(x) - g(y))."""
    f = G.check_function(f)
    g = f if g is None else G.check_function(g)
    df = f[G.edge_u] - f[G.edge_v]
    dg = g[G.edge_u] - g[G.edge_v]
    return float(np.sum(G.cond * df * dg))


@dataclass(frozen=True)
class EnergyMeasure:
    density: np.ndarray

    @property
    def total(self) -> float:
        return float(self.density.sum())

    def integrate(self, h) -> float:
        return float(np.dot(h, self.density))


def edge_energy(G: WeightedGraph, f, g=None) -> np.ndarray:
    """Per-edge energies ``c_xy (f(x) - f(y)) (g(x) - g(y))``."""
    f = G.check_function(f)
    g = f if g is None else G.check_function(g)
    return G.cond * (f[G.edge_u] - f[G.edge_v]) * (g[G.edge_u] - g[G.edge_v])


def energy_measure(G: WeightedGraph, f, g=None) -> EnergyMeasure:
    """Vertex density of Gamma(f, g); half of every edge term goes to each end."""
    e = 0.5 * edge_energy(G, f, g)
    density = np.bincount(G.edge_u, weights=e, minlength=G.n)
    density += np.bincount(G.edge_v, weights=e, minlength=G.n)
    return EnergyMeasure(density)


def laplacian_apply(G: WeightedGraph, f) -> np.ndarray:
    """Generator ``Lf(x) = mu(x)^-1 sum_y c_xy (f(x) - f(y))``; ``<Lf, g>_mu = E(f, g)``."""
    f = G.check_function(f)
    return (G.stiffness() @ f) / G.mu


def inner(G: WeightedGraph, f, g) -> float:
    return float(np.sum(G.check_function(f) * G.check_function(g) * G.mu))


# -- volumes -----------------------------------------------------------------

def ball(G: WeightedGraph, x: int, r: float, closed: bool = True) -> np.ndarray:
    d = G.distances_from(x)
    return d <= r if closed else d < r


def ball_volume(G: WeightedGraph, x: int, r: float) -> float:
    """mu of the closed ball {y : d(x, y) <= r}."""
    if r < 0:
        raise DomainError("radius must be nonnegative")
    return float(G.mu[ball(G, x, r)].sum())


@dataclass
class ScalingFit:
    """Power-law fit ``value ~ c * scale**exponent``.

    ``c_low``/``c_high`` bracket ``value / scale**exponent`` over the samples.
    """

    exponent: float
    c_low: float
    c_high: float
    residual_rms: float
    r_squared: float
    samples: list = field(default_factory=list)
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        assert np.isfinite(self.exponent)
        assert self.c_low <= self.c_high


def power_law_fit(scales, values, groups=None) -> ScalingFit:
    """Least-squares slope of log(values) on log(scales).

    With ``groups`` each group gets its own intercept and the slope is shared
    (a pooled fit); the constant range is still computed with a common exponent.
    """
    s = np.asarray(scales, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(s <= 0) or np.any(v <= 0):
        raise InsufficientDataError("power-law fit needs positive scales and values")
    ls, lv = np.log(s), np.log(v)
    if groups is None:
        groups = np.zeros(len(s), dtype=int)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    X = np.zeros((len(s), 1 + len(labels)))
    X[:, 0] = ls
    for j, lab in enumerate(labels):
        X[groups == lab, 1 + j] = 1.0
    coef, *_ = np.linalg.lstsq(X, lv, rcond=None)
    resid = lv - X @ coef
    sst = np.sum((lv - np.array([lv[groups == g].mean() for g in groups])) ** 2)
    r2 = 1.0 - np.sum(resid**2) / sst if sst > 0 else 1.0
    exponent = float(coef[0])
    ratio = v / s**exponent
    return ScalingFit(
        exponent=exponent,
        c_low=float(ratio.min()),
        c_high=float(ratio.max()),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        r_squared=float(min(max(r2, 0.0), 1.0)),
        samples=list(zip(s.tolist(), v.tolist())),
        residuals=resid,
    )


def check_interior(G: WeightedGraph, x: int, radius: float, closed: bool = True):
    """Raise :class:`BoundaryError` if the ball meets the boundary or fills G."""
    members = ball(G, x, radius, closed)
    if G.boundary and members[list(G.boundary)].any():
        raise BoundaryError(f"ball B({x}, {radius}) touches the graph boundary")
    if members.all():
        raise BoundaryError(f"ball B({x}, {radius}) covers the whole graph")


def ahlfors_fit(G: WeightedGraph, centers: Sequence[int], radii: Sequence[float]) -> ScalingFit:
    """Volume growth exponent from closed-ball volumes around ``centers``."""
    radii = sorted(set(float(r) for r in radii))
    if len(radii) < 3:
        raise InsufficientDataError("ahlfors_fit needs at least 3 distinct radii")
    if radii[0] < 1:
        raise DomainError("radii must be >= 1")
    scales, vols = [], []
    for x in centers:
        check_interior(G, x, radii[-1])
        for r in radii:
            scales.append(r)
            vols.append(ball_volume(G, x, r))
    return power_law_fit(scales, vols)


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_edge_list(G: WeightedGraph, path) -> None:
    """Plain-text format: ``v mu [coords...]`` vertex lines, then ``u v c`` edge lines."""
    lines = [f"# davieslab graph {G.name}", "# vertices: v mu [coords...]"]
    for v in range(G.n):
        row = [str(v), _fmt(G.mu[v])]
        if G.coords is not None:
            row += [_fmt(c) for c in np.atleast_1d(G.coords[v])]
        lines.append(" ".join(row))
    if G.boundary:
        lines.append("# boundary " + " ".join(str(b) for b in sorted(G.boundary)))
    lines.append("# edges: u v c")
    for u, v, c in zip(G.edge_u, G.edge_v, G.cond):
        lines.append(f"{u} {v} {_fmt(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path, name=None) -> WeightedGraph:
    section = None
    mus: dict[int, float] = {}
    coords: dict[int, tuple] = {}
    edges, conds, boundary = [], [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# vertices"):
                section = "v"
            elif line.startswith("# edges"):
                section = "e"
            elif line.startswith("# boundary"):
                boundary = [int(t) for t in line.split()[2:]]
            continue
        tok = line.split()
        if section == "e" or (section is None and len(tok) == 3):
            edges.append((int(tok[0]), int(tok[1])))
            conds.append(float(Decimal(tok[2])))
        else:
            if len(tok) < 2:
                raise ConfigurationError(f"bad vertex line: {raw!r}")
            v = int(tok[0])
            mus[v] = float(Decimal(tok[1]))
            if len(tok) > 2:
                coords[v] = tuple(float(Decimal(c)) for c in tok[2:])
    n = max(mus) + 1 if mus else 0
    if sorted(mus) != list(range(n)):
        raise ConfigurationError("vertex ids must be 0..n-1")
    mu = np.array([mus[v] for v in range(n)])
    if coords and len({len(c) for c in coords.values()}) != 1:
        raise ConfigurationError("vertex coordinates must all have the same dimension")
    xy = np.array([coords[v] for v in range(n)]) if len(coords) == n and n else None
    return WeightedGraph(n, edges, conds, mu, xy, boundary, name or Path(path).stem)
