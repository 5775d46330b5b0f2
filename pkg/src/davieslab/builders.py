"""Pre-fractal and lattice test graphs, plus exit-time walk-dimension estimates."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, InsufficientDataError, NumericalError
from .graph import ScalingFit, WeightedGraph, check_interior, power_law_fit

SIERPINSKI_MAX_LEVEL = 8
VICSEK_MAX_LEVEL = 6
LATTICE_MAX_VERTICES = 10_000


def sierpinski_vertex_count(level: int) -> int:
    return 3 * (3**level + 1) // 2


def build_sierpinski(level: int, mu="degree") -> WeightedGraph:
    """Level-``level`` Sierpinski gasket graph with unit conductances.

    Vertices live on the integer skew lattice ``{(a, b): a, b >= 0, a + b <= 2**level}``;
    the gasket is the union of ``3**level`` unit triangles.
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= SIERPINSKI_MAX_LEVEL:
        raise ConfigurationError(f"sierpinski level must be in [0, {SIERPINSKI_MAX_LEVEL}], got {level!r}")
    offsets = [(0, 0)]
    for k in range(level - 1, -1, -1):
        s = 2**k
        offsets = [(a + da, b + db) for a, b in offsets for da, db in ((0, 0), (s, 0), (0, s))]
    index: dict[tuple, int] = {}

    def vid(p):
        if p not in index:
            index[p] = len(index)
        return index[p]

    edges = []
    for a, b in sorted(offsets):
        p, q, r = vid((a, b)), vid((a + 1, b)), vid((a, b + 1))
        edges += [(p, q), (p, r), (q, r)]
    ab = np.array(sorted(index, key=index.get), dtype=float)
    coords = np.c_[ab[:, 0] + 0.5 * ab[:, 1], ab[:, 1] * np.sqrt(3) / 2]
    return WeightedGraph(len(index), edges, mu=mu, coords=coords, name=f"sierpinski-{level}")


def sierpinski_point(G: WeightedGraph, a: float, b: float) -> int:
    """Vertex nearest to skew coordinates ``(a, b)`` given as fractions of the side."""
    side = G.coords[:, 0].max()
    target = np.array([a * side + 0.5 * b * side, b * side * np.sqrt(3) / 2])
    return int(np.argmin(np.sum((G.coords - target) ** 2, axis=1)))


def build_lattice(dim: int, side: int, mu="degree") -> WeightedGraph:
    """Box ``{0..side-1}^dim`` in Z^dim; faces of the box are the boundary."""
    if dim not in (1, 2, 3):
        raise ConfigurationError(f"lattice dim must be 1, 2 or 3, got {dim!r}")
    if side < 2:
        raise ConfigurationError("lattice side must be >= 2")
    if side**dim > LATTICE_MAX_VERTICES:
        raise ConfigurationError(f"lattice side**dim = {side**dim} exceeds {LATTICE_MAX_VERTICES}")
    shape = (side,) * dim
    idx = np.arange(side**dim).reshape(shape)
    edges = []
    for ax in range(dim):
        lo = np.take(idx, range(side - 1), axis=ax).ravel()
        hi = np.take(idx, range(1, side), axis=ax).ravel()
        edges.append(np.c_[lo, hi])
    coords = np.array(list(itertools.product(range(side), repeat=dim)), dtype=float)
    on_face = np.any((coords == 0) | (coords == side - 1), axis=1)
    return WeightedGraph(side**dim, np.vstack(edges), mu=mu, coords=coords,
                         boundary=np.flatnonzero(on_face), name=f"lattice-{dim}d-{side}")


def build_vicsek(level: int, mu="degree") -> WeightedGraph:
    """Level-``level`` Vicsek cross: five level-(n-1) copies glued at their tips.

    Level 0 is the plus shape (centre and four unit arms).  The four outermost
    tips are the boundary.
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= VICSEK_MAX_LEVEL:
        raise ConfigurationError(f"vicsek level must be in [0, {VICSEK_MAX_LEVEL}], got {level!r}")
    centres = [(0, 0)]
    for k in range(level - 1, -1, -1):
        s = 2 * 3**k
        centres = [(x + dx, y + dy) for x, y in centres
                   for dx, dy in ((0, 0), (s, 0), (-s, 0), (0, s), (0, -s))]
    index: dict[tuple, int] = {}

    def vid(p):
        if p not in index:
            index[p] = len(index)
        return index[p]

    edges = []
    for x, y in sorted(centres):
        c = vid((x, y))
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            edges.append((c, vid((x + dx, y + dy))))
    pts = np.array(sorted(index, key=index.get), dtype=float)
    h = 3**level
    tips = [index[p] for p in ((h, 0), (-h, 0), (0, h), (0, -h))]
    return WeightedGraph(len(index), edges, mu=mu, coords=pts, boundary=tips,
                         name=f"vicsek-{level}")


# -- exit times ----------------------------------------------------------------

@dataclass
class ExitTimeProfile:
    """Mean exit times ``m(x, r)`` from the open balls ``{y : d(x, y) < r}``."""

    center: int
    radii: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        assert np.all(self.times >= 0)


def mean_exit_time_function(G: WeightedGraph, inside: np.ndarray) -> np.ndarray:
    """Solve ``L m = 1`` on ``inside`` with ``m = 0`` elsewhere."""
    B = np.flatnonzero(inside)
    m = np.zeros(G.n)
    if len(B) == 0:
        return m
    K = G.stiffness()[B][:, B].tocsc()
    sol = spsolve(K, G.mu[B])
    sol = np.atleast_1d(sol)
    resid = K @ sol - G.mu[B]
    if not np.all(np.isfinite(sol)) or np.max(np.abs(resid)) > 1e-10 * max(1.0, np.max(np.abs(sol))):
        raise NumericalError("exit-time solve did not reach tolerance")
    m[B] = sol
    return m


def mean_exit_times(G: WeightedGraph, x: int, radii) -> ExitTimeProfile:
    """Expected exit time of the continuous-time walk (rates ``c_xy / mu(x)``).

    Balls are open, ``{d < r}``, so ``r = 0`` gives the empty ball and time 0.
    """
    radii = np.asarray(sorted(float(r) for r in radii))
    d = G.distances_from(x)
    times = []
    for r in radii:
        inside = d < r
        if r > 0:
            check_interior(G, x, r, closed=False)
        times.append(mean_exit_time_function(G, inside)[x] if inside.any() else 0.0)
    times = np.array(times)
    for (r0, t0), (r1, t1) in zip(zip(radii, times), zip(radii[1:], times[1:])):
        if np.ceil(r1) > np.ceil(r0) and not t1 > t0:
            raise NumericalError(f"exit times not increasing between r={r0} and r={r1}")
    return ExitTimeProfile(int(x), radii, times)


def fit_walk_dimension(profiles) -> ScalingFit:
    """Pooled slope of log m against log r with one intercept per centre."""
    scales, values, groups = [], [], []
    for j, prof in enumerate(profiles):
        keep = (prof.radii > 0) & (prof.times > 0)
        if keep.sum() < 3:
            raise InsufficientDataError("each exit-time profile needs >= 3 positive radii")
        scales += prof.radii[keep].tolist()
        values += prof.times[keep].tolist()
        groups += [j] * int(keep.sum())
    if not scales:
        raise InsufficientDataError("no exit-time profiles supplied")
    return power_law_fit(scales, values, groups)


def interior_vertices(G: WeightedGraph, radius: float, closed: bool = True) -> np.ndarray:
    """Vertices whose ball of ``radius`` neither meets the boundary nor fills G."""
    good = []
    bnd = sorted(G.boundary)
    for x in range(G.n):
        d = G.distances_from(x)
        members = d <= radius if closed else d < radius
        if members.all():
            continue
        if bnd and members[bnd].any():
            continue
        good.append(x)
    return np.array(good, dtype=int)
