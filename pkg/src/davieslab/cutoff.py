"""Annulus cutoff functions and measured cutoff Sobolev constants.

Conventions: balls are closed, the annulus of ``(x, R, r)`` is
``U = {R < d(x, .) <= R + r}`` and a cutoff is ``1`` on ``{d <= R}`` and ``0`` on
``{d >= R + r}``.  Nothing here assumes that energy measures of different
cutoffs are mutually singular; cross terms are computed, not dropped.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import spsolve

from .errors import BoundaryError, ConfigurationError, NumericalError, PreconditionError
from .graph import WeightedGraph, dirichlet_energy, edge_energy, energy_measure, signed_power

DEFAULT_C1_GRID = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class AnnulusSpec:
    center: int
    R: float
    r: float

    @property
    def outer(self) -> float:
        return self.R + self.r

    def distances(self, G: WeightedGraph) -> np.ndarray:
        return G.distances_from(self.center)

    def inner_mask(self, G):
        return self.distances(G) <= self.R

    def annulus_mask(self, G):
        d = self.distances(G)
        return (d > self.R) & (d <= self.outer)

    def outside_mask(self, G):
        return self.distances(G) > self.outer

    def validate(self, G: WeightedGraph) -> "AnnulusSpec":
        if self.R < 0 or not self.r > 0:
            raise PreconditionError(f"need R >= 0 and r > 0, got R={self.R}, r={self.r}")
        if not self.annulus_mask(G).any():
            raise PreconditionError("annulus contains no vertex")
        if not self.outside_mask(G).any():
            raise BoundaryError("outer ball covers the whole graph")
        d = self.distances(G)
        if G.boundary and np.any(d[sorted(G.boundary)] <= self.outer):
            raise BoundaryError("outer ball touches the graph boundary")
        return self


@dataclass
class CutoffFunction:
    values: np.ndarray
    annulus: AnnulusSpec
    tag: str
    info: dict = field(default_factory=dict)

    def certify(self, G: WeightedGraph) -> "CutoffFunction":
        v = self.values
        d = self.annulus.distances(G)
        if not (np.all(v[d <= self.annulus.R] == 1.0) and np.all(v[d >= self.annulus.outer] == 0.0)):
            raise NumericalError(f"{self.tag} cutoff violates its 1/0 certificate")
        if v.min() < 0.0 or v.max() > 1.0:
            raise NumericalError(f"{self.tag} cutoff leaves [0, 1]")
        return self


def _linear_profile(d, R, r):
    return np.clip((R + r - d) / r, 0.0, 1.0)


def _harmonic_profile(G: WeightedGraph, d, R, r):
    phi = np.where(d <= R, 1.0, 0.0)
    free = np.flatnonzero((d > R) & (d < R + r))
    if len(free) == 0:
        return phi
    K = G.stiffness()
    fixed = np.flatnonzero(~((d > R) & (d < R + r)))
    rhs = -(K[free][:, fixed] @ phi[fixed])
    sol = np.atleast_1d(spsolve(K[free][:, free].tocsc(), rhs))
    if not np.all(np.isfinite(sol)):
        raise NumericalError("harmonic cutoff solve failed")
    # maximum principle holds exactly; clip rounding noise only
    phi[free] = np.clip(sol, 0.0, 1.0)
    return phi


def linear_cutoff(G: WeightedGraph, A: AnnulusSpec) -> CutoffFunction:
    """``min(1, max(0, (R + r - d) / r))``."""
    A.validate(G)
    return CutoffFunction(_linear_profile(A.distances(G), A.R, A.r), A, "linear").certify(G)


def harmonic_cutoff(G: WeightedGraph, A: AnnulusSpec) -> CutoffFunction:
    """Capacity minimiser: harmonic strictly between the two spheres."""
    A.validate(G)
    phi = _harmonic_profile(G, A.distances(G), A.R, A.r)
    return CutoffFunction(phi, A, "harmonic").certify(G)


def base_profile(G, d, R, r, base: str):
    if base == "harmonic":
        return _harmonic_profile(G, d, R, r)
    if base == "linear":
        return _linear_profile(d, R, r)
    raise ConfigurationError(f"unknown cutoff base {base!r}")


# -- CSA frontier ----------------------------------------------------------------

@dataclass
class CSAPair:
    C1: float
    C2: float
    witness: np.ndarray
    violations: int

    @property
    def witness_norm(self) -> float:
        return float(np.linalg.norm(self.witness))


@dataclass
class CSAFrontier:
    pairs: list
    dw: float
    annulus: AnnulusSpec

    def C2(self, C1: float) -> float:
        for p in self.pairs:
            if p.C1 == C1:
                return p.C2
        raise KeyError(C1)

    def to_json(self) -> str:
        return json.dumps([{"C1": p.C1, "C2": p.C2, "witness_norm": p.witness_norm,
                            "violations": p.violations} for p in self.pairs], indent=2)


def _csa_forms(G: WeightedGraph, phi, A: AnnulusSpec):
    """Quadratic forms of the CSA inequality reduced to functions on U.

    Values of f off U only enter the phi-weighted energy term, so they are
    eliminated by minimising that term (a Schur complement over the diagonal
    neighbour block).  Returns ``(QA, S, M, U, N, elim)`` where ``elim`` maps
    ``f_U`` to the minimising ``f_N``.
    """
    U = np.flatnonzero(A.annulus_mask(G))
    inU = np.zeros(G.n, bool)
    inU[U] = True
    gam = energy_measure(G, phi).density
    QA = gam[U]
    # edge weights of f -> sum_{x in U} phi(x)^2 Gamma(f, f)(x)
    w = 0.5 * G.cond * (phi[G.edge_u] ** 2 * inU[G.edge_u] + phi[G.edge_v] ** 2 * inU[G.edge_v])
    keep = w > 0
    eu, ev, ww = G.edge_u[keep], G.edge_v[keep], w[keep]
    touched = np.union1d(eu, ev)
    N = np.setdiff1d(touched, U)
    idx = -np.ones(G.n, dtype=int)
    idx[U] = np.arange(len(U))
    idx[N] = len(U) + np.arange(len(N))
    m = len(U) + len(N)
    B = np.zeros((m, m))
    iu, iv = idx[eu], idx[ev]
    np.add.at(B, (iu, iu), ww)
    np.add.at(B, (iv, iv), ww)
    np.add.at(B, (iu, iv), -ww)
    np.add.at(B, (iv, iu), -ww)
    nu = len(U)
    BUU, BUN, bNN = B[:nu, :nu], B[:nu, nu:], np.diag(B[nu:, nu:]).copy()
    # no N-N edges carry weight, so the N block is diagonal and positive
    S = BUU - (BUN / bNN[None, :]) @ BUN.T
    S = 0.5 * (S + S.T)
    elim = -(BUN.T / bNN[:, None])
    return QA, S, G.mu[U], U, N, elim


def csa_sides(G: WeightedGraph, phi, f, A: AnnulusSpec):
    """The three integrals of the CSA inequality for a given f."""
    U = A.annulus_mask(G)
    lhs = float(np.sum((f**2 * energy_measure(G, phi).density)[U]))
    mid = float(np.sum((phi**2 * energy_measure(G, f).density)[U]))
    mass = float(np.sum((f**2 * G.mu)[U]))
    return lhs, mid, mass


def csa_frontier(G: WeightedGraph, phi, A: AnnulusSpec, dw: float, C1grid=DEFAULT_C1_GRID,
                 n_validate: int = 100, seed: int = 0) -> CSAFrontier:
    """Smallest C2 for each C1 such that the cutoff Sobolev annulus inequality holds.

    ``C2(C1) = r**dw * max(0, lambda_max(QA - C1 S, M))`` with the pencil taken
    over functions on ``U``; each pair is checked on ``n_validate`` random f.
    """
    if isinstance(phi, CutoffFunction):
        phi = phi.values
    phi = G.check_function(phi)
    A.validate(G)
    QA, S, M, U, N, elim = _csa_forms(G, phi, A)
    s = 1.0 / np.sqrt(M)
    rng = np.random.default_rng(seed)
    pairs = []
    for C1 in sorted(float(c) for c in C1grid):
        P = (np.diag(QA) - C1 * S) * s[:, None] * s[None, :]
        P = 0.5 * (P + P.T)
        try:
            lam, vec = linalg.eigh(P, subset_by_index=[len(U) - 1, len(U) - 1])
        except linalg.LinAlgError as exc:
            raise NumericalError(f"CSA pencil eigensolve failed at C1={C1}: {exc}") from exc
        # an identically zero left side needs no mass term at all
        top = float(lam[0]) if np.any(QA) else 0.0
        C2 = A.r**dw * max(top, 0.0)
        witness = np.zeros(G.n)
        witness[U] = vec[:, 0] * s
        witness[N] = elim @ witness[U]
        violations = _validate_pair(G, phi, A, dw, C1, C2, witness, rng, n_validate)
        pairs.append(CSAPair(C1, C2, witness, violations))
    for a, b in zip(pairs, pairs[1:]):
        if b.C2 > a.C2 * (1 + 1e-9) + 1e-12:
            raise NumericalError("CSA frontier is not non-increasing")
    return CSAFrontier(pairs, dw, A)


def _validate_pair(G, phi, A, dw, C1, C2, witness, rng, n):
    eps = 1e-9 * (1.0 + C2)
    U = A.annulus_mask(G)
    support = A.distances(G) <= A.outer + 1
    bad = 0
    for k in range(n):
        if k % 2 == 0:
            f = rng.standard_normal(G.n) * support
        else:
            f = witness + 0.1 * np.linalg.norm(witness[U]) / np.sqrt(U.sum()) * rng.standard_normal(G.n)
        lhs, mid, mass = csa_sides(G, phi, f, A)
        rhs = C1 * mid + (C2 + eps) / A.r**dw * mass
        if lhs > rhs * (1 + 1e-12) + 1e-15:
            bad += 1
    return bad


# -- self-improving construction -----------------------------------------------------

def subannulus_radii(R: float, r: float, n: int) -> np.ndarray:
    """``R + floor(i r / n + 1/2)`` for ``i = 0..n`` (cumulative rounding)."""
    i = np.arange(n + 1)
    return R + np.floor(i * r / n + 0.5)


def sip_construct(G: WeightedGraph, A: AnnulusSpec, rho: float, base: str = "harmonic") -> CutoffFunction:
    """Average of ``n = floor(1/rho)`` cutoffs, one per equal-width sub-annulus.

    ``info`` holds the sub-annulus radii, the deviation from the linear profile
    (bounded by ``2 rho``) and the energy-measure cross terms between parts.
    """
    if not 0 < rho <= 1:
        raise PreconditionError(f"rho must lie in (0, 1], got {rho}")
    A.validate(G)
    n = int(math.floor(1.0 / rho + 1e-12))
    if A.r / n < 1:
        raise PreconditionError(
            f"annulus width {A.r} too thin for rho={rho} (needs {n} sub-annuli of width >= 1)")
    d = A.distances(G)
    radii = subannulus_radii(A.R, A.r, n)
    parts = [base_profile(G, d, radii[i - 1], radii[i] - radii[i - 1], base) for i in range(1, n + 1)]
    phi = np.mean(parts, axis=0)
    phi[d <= A.R] = 1.0
    phi[d >= A.outer] = 0.0

    U = A.annulus_mask(G)
    deviation = float(np.max(np.abs(phi[U] - (A.outer - d[U]) / A.r)))
    diag = sum(float(np.sum(np.abs(edge_energy(G, p)))) for p in parts)
    cross = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            # each edge spreads its energy over both endpoints, so the vertex
            # density mass equals the edge-term mass
            cross += 2 * float(np.sum(np.abs(edge_energy(G, parts[i], parts[j]))))
    info = {
        "n": n,
        "rho": rho,
        "radii": radii.tolist(),
        "max_deviation": deviation,
        "deviation_bound": 2 * rho,
        "cross_term_mass": cross,
        "cross_term_share": cross / (cross + diag) if cross + diag > 0 else 0.0,
        "energy": dirichlet_energy(G, phi),
    }
    return CutoffFunction(phi, A, f"sip({rho:g})", info).certify(G)


def drive_rho(p: float, lam: float, C1hat: float) -> float:
    return min(1.0, 1.0 / (p * lam * math.sqrt(8.0 * C1hat)))


def drive_cutoff(G: WeightedGraph, A: AnnulusSpec, p: float, lam: float, C1hat: float,
                 base: str = "harmonic", saturate: bool = False) -> CutoffFunction:
    """The ``(p, lambda)``-adapted cutoff: ``sip_construct`` with
    ``rho = min(1, (p lambda)^-1 / sqrt(8 C1hat))``.

    With ``saturate=True`` the number of sub-annuli is capped at ``floor(r)``,
    i.e. the construction stops refining once every sub-annulus is one edge
    wide (the cutoff is then the linear profile for a harmonic base).
    """
    if not C1hat > 0:
        raise PreconditionError("C1hat must be positive")
    if p < 1 or lam < 1:
        raise PreconditionError("drive_cutoff needs p >= 1 and lambda >= 1")
    rho = drive_rho(p, lam, C1hat)
    n = int(math.floor(1.0 / rho + 1e-12))
    width = int(math.floor(A.r))
    if n > width:
        if not saturate:
            limit = (width + 1) / math.sqrt(8.0 * C1hat)
            err = PreconditionError(
                f"annulus width {A.r} too thin for p*lambda={p * lam:g}; "
                f"feasible only for p*lambda < {limit:g}")
            err.max_p_lambda = limit
            raise err
        rho = 1.0 / width
    cf = sip_construct(G, A, rho, base)
    cf.tag = f"drive(p={p:g},lambda={lam:g})"
    cf.info.update({"p": p, "lambda": lam, "C1hat": C1hat, "saturated": n > width})
    return cf


def step_constant(G: WeightedGraph, A: AnnulusSpec, p: float, lam: float, C1hat: float,
                  base: str = "harmonic", saturate: bool = False) -> float:
    """``p lambda ||phi_{p,lambda} - phi_{2p,lambda}||_inf``."""
    a = drive_cutoff(G, A, p, lam, C1hat, base, saturate).values
    b = drive_cutoff(G, A, 2 * p, lam, C1hat, base, saturate).values
    return float(p * lam * np.max(np.abs(a - b)))


def perturbation_energy_constant(G: WeightedGraph, phi, p: float, lam: float, f, r: float,
                                 dw: float) -> float:
    """Smallest C with ``(p lam)^2 int f^{2p} dGamma(phi) <= E(f^p)/2 + C (lam p / r)^dw ||f||_{2p}^{2p}``."""
    if isinstance(phi, CutoffFunction):
        phi = phi.values
    f = np.abs(G.check_function(f))
    lhs = (p * lam) ** 2 * float(np.dot(f ** (2 * p), energy_measure(G, phi).density))
    fp = signed_power(f, p)
    mass = float(np.sum(f ** (2 * p) * G.mu))
    excess = lhs - 0.5 * dirichlet_energy(G, fp)
    return max(0.0, excess) * r**dw / ((lam * p) ** dw * mass)
