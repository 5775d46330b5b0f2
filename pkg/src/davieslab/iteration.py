"""The perturbed-semigroup iteration over ``p_k = 2**k`` and its closing steps.

For a centre ``x``, radius ``r`` and amplitude ``lam`` the level-``k`` flow is
``f_{t,k} = P_t^{psi_k} f`` with ``psi_k = lam * phi_{p_k, lam}`` the adapted
cutoff of ``B(x, r) ⊂ B(x, 2r)``.  The trace records

* ``u_{k+1}(t) = ||f_{t,k}||_{2 p_k}`` and its running-sup weight
  ``w_{k+1}(t) = sup_{s <= t} s^{df (p - 2) / (2 dw p)} u_{k+1}(s)`` (``p = 2 p_k``),
* exact time derivatives of ``||f_{t,k}||_{2p_k}^{2p_k}`` (spectral), the
  matching energy identity, and ``E(f^{p_k}, f^{p_k})``,

all normalised by ``||f_{t,k}||_{2p_k}^{2p_k}`` so that ``p_k`` in the
thousands stays in floating range.  Constants (C0, the step constant, C_N) are
measured on the run as the smallest values making each inequality hold.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from .cutoff import AnnulusSpec, drive_cutoff
from .errors import ConvergenceError, DomainError, InsufficientDataError, NumericalError
from .graph import WeightedGraph, dirichlet_energy, lp_norm
from .heat import SpectralData
from .perturb import PerturbationSpec, perturb_apply, perturb_derivative, perturbed_kernel

log = logging.getLogger(__name__)

MAX_LEVELS = 12
SANDWICH_TOL = 1e-4


def geometric_grid(t0: float, t1: float, per_decade: int = 9) -> np.ndarray:
    n = max(2, int(round(per_decade * math.log10(t1 / t0))) + 1)
    return np.geomspace(t0, t1, n)


@dataclass
class LevelRecord:
    k: int
    p: float                 # cutoff index p_k = 2**k
    psi: np.ndarray
    u: np.ndarray            # ||f_{t,k}||_{2 p_k}
    w: np.ndarray
    rate: np.ndarray         # d/dt log ||f_{t,k}||_{2p_k}^{2p_k} (exact)
    identity_rate: np.ndarray  # -2 p_k E(e^psi g^{2p-1}, e^-psi g) with g normalised
    energy: np.ndarray       # E(g^{p_k}, g^{p_k}) with g normalised
    lower_ratio: np.ndarray  # ||f_{t,k}||_{2p_k} / ||f_{t,k}||_{p_k}
    sandwich_ok: bool | None = None

    @property
    def norm_index(self) -> float:
        return 2 * self.p


@dataclass
class IterationTrace:
    center: int
    r: float
    lam: float
    df: float
    dw: float
    tgrid: np.ndarray
    levels: list
    C_step: float
    C0: float
    C0_level0_global: float
    truncation_factor: float
    saturated_from: int | None
    sign: int = 1
    C_N: float | None = None
    notes: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.levels) - 1

    @property
    def theta(self) -> float:
        return 2 * self.dw / self.df

    @property
    def delta(self) -> float:
        return self.C0 * (self.lam / self.r) ** self.dw if self.lam > 0 else 0.0

    def C_A(self, C_N: float | None = None) -> float:
        C_N = self.C_N if C_N is None else C_N
        return 2 * C_N * math.exp(8 * self.dw * self.C_step / self.df)

    def to_json(self) -> str:
        out = {
            "center": self.center, "r": self.r, "lambda": self.lam, "df": self.df, "dw": self.dw,
            "sign": self.sign, "C_step": self.C_step, "C0": self.C0, "C_N": self.C_N,
            "C0_level0_global": self.C0_level0_global,
            "truncation_factor": self.truncation_factor, "saturated_from": self.saturated_from,
            "t": self.tgrid.tolist(),
            "levels": [{"k": L.k, "p": L.p, "u": L.u.tolist(), "w": L.w.tolist(),
                        "rate": L.rate.tolist(), "energy": L.energy.tolist(),
                        "sandwich_ok": L.sandwich_ok} for L in self.levels],
        }
        return json.dumps(out, indent=1)


def _energy_rate(G: WeightedGraph, g, psi, p):
    """``-2p E(e^psi g^{2p-1}, e^-psi g)`` for a nonnegative g."""
    a = np.exp(psi) * g ** (2 * p - 1)
    b = np.exp(-psi) * g
    return -2 * p * dirichlet_energy(G, a, b)


def _global_level0_rate(G: WeightedGraph, psi) -> float:
    """``sup_g -2 E(e^psi g, e^-psi g) / ||g||_2^2`` as a symmetric eigenproblem."""
    K = G.stiffness().toarray()
    e = np.exp(psi)
    Q = -(e[:, None] * K / e[None, :])
    Q = 0.5 * (Q + Q.T)
    s = 1.0 / np.sqrt(G.mu)
    top = linalg.eigvalsh(Q * s[:, None] * s[None, :], subset_by_index=[G.n - 1, G.n - 1])[0]
    return 2.0 * float(top)


def davies_iterate(S: SpectralData, x: int, r: float, lam: float, f, tgrid, K: int,
                   df: float, dw: float, C1hat: float = 1.0, base: str = "harmonic",
                   sign: int = 1) -> IterationTrace:
    """Run the level cascade ``k = 0..K`` and record norms, weights and rates.

    ``lam = 0`` gives the unperturbed run (psi = 0).  ``sign=-1`` runs the
    adjoint cascade with ``-psi_k``.
    """
    G = S.graph
    if 0 < lam < 1 or lam < 0:
        raise DomainError("lambda must be 0 (unperturbed) or >= 1")
    if K < 0 or K > MAX_LEVELS:
        raise DomainError(f"K must lie in [0, {MAX_LEVELS}]")
    f = G.check_function(f)
    if np.any(f < 0):
        raise DomainError("iteration needs f >= 0")
    if abs(lp_norm(f, G.mu, 2) - 1.0) > 1e-8:
        raise DomainError("iteration needs ||f||_2 = 1")
    tgrid = np.asarray(sorted(float(t) for t in tgrid))
    if tgrid[0] <= 0:
        raise DomainError("time grid must be positive")
    A = AnnulusSpec(int(x), float(r), float(r)).validate(G)

    psis, saturated_from, step = [], None, 0.0
    for k in range(K + 1):
        if lam == 0:
            psis.append(np.zeros(G.n))
            continue
        if k > 0 and saturated_from is not None:
            psis.append(psis[-1])
            continue
        cf = drive_cutoff(G, A, 2.0**k, lam, C1hat, base, saturate=True)
        psi = sign * lam * cf.values
        if k > 0:
            gap = float(np.max(np.abs(psi - psis[-1])))
            step = max(step, 2.0 ** (k - 1) * gap)
            if math.exp(2 * gap) - 1 < SANDWICH_TOL:
                saturated_from = k
        if cf.info.get("saturated") and saturated_from is None:
            saturated_from = k
        psis.append(psi)
    trunc = 1.0 if (saturated_from is not None or lam == 0) else math.exp(4 * step / 2.0**K)

    levels, prev = [], None
    for k, psi in enumerate(psis):
        p = 2.0**k
        F = perturb_apply(S, psi, tgrid, f)           # N x T
        dF = perturb_derivative(S, psi, tgrid, f)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(dF))):
            warnings.warn(f"non-finite flow at level {k}; truncating the cascade", stacklevel=2)
            break
        F = np.maximum(F, 0.0)  # P_t is positivity preserving; clear rounding noise
        u = np.array([lp_norm(F[:, j], G.mu, 2 * p) for j in range(len(tgrid))])
        lower = np.array([lp_norm(F[:, j], G.mu, p) for j in range(len(tgrid))])
        q = 2 * p
        expo = df * (q - 2) / (2 * dw * q)
        w = np.maximum.accumulate(tgrid**expo * u)
        rate = np.empty(len(tgrid))
        ident = np.empty(len(tgrid))
        energy = np.empty(len(tgrid))
        psi_n = psi - psi.min()
        for j in range(len(tgrid)):
            g = F[:, j] / u[j]
            # d/dt sum g^{2p} mu, with g = F / ||F||_{2p}
            rate[j] = 2 * p * float(np.sum(g ** (2 * p - 1) * (dF[:, j] / u[j]) * G.mu))
            ident[j] = _energy_rate(G, g, psi_n, p)
            energy[j] = dirichlet_energy(G, g**p)
        rec = LevelRecord(k, p, psi, u, w, rate, ident, energy, u / lower)
        if prev is not None:
            bound = math.exp(2 * step / 2.0 ** (k - 1)) if step > 0 else 1.0
            lo, hi = prev[0] / bound, prev[0] * bound
            rec_prev = levels[-1]
            rec_prev.sandwich_ok = bool(np.all(F >= lo * (1 - 1e-12) - 1e-300)
                                        and np.all(F <= hi * (1 + 1e-12) + 1e-300))
            if not rec_prev.sandwich_ok:
                raise NumericalError(f"contraction sandwich fails between levels {k - 1} and {k}")
        levels.append(rec)
        prev = (F,)

    # smallest C0 making the differential inequalities hold on the grid
    c0 = 0.0
    c0_global = 0.0
    if lam > 0:
        scale = (lam / r) ** dw
        c0_global = max(0.0, _global_level0_rate(G, psis[0] - psis[0].min())) / (2 * scale)
        for rec in levels:
            need = (rec.rate + (rec.energy if rec.k > 0 else 0.0)) / (2 * scale * rec.p**dw)
            c0 = max(c0, float(need.max()))
        c0 = max(c0, c0_global)
    trace = IterationTrace(int(x), float(r), float(lam), df, dw, tgrid, levels, step, c0,
                           c0_global, trunc, saturated_from, sign)
    trace.C_N = measure_nash_constant(trace)
    return trace


def measure_nash_constant(trace: IterationTrace) -> float:
    """Smallest C_N with which the Nash-driven rate inequality holds on the run."""
    th = trace.theta
    need = 0.0
    for rec in trace.levels[1:]:
        p = rec.p
        A = np.exp(th * p * np.log(rec.lower_ratio))
        B = trace.C0 * p ** (trace.dw - 1) * ((trace.lam / trace.r) ** trace.dw if trace.lam else 0.0)
        D = rec.rate / (2 * p)
        gap = B - D
        if np.any(gap <= 0):
            raise NumericalError("rate exceeds the drift term; C0 is inconsistent")
        need = max(need, float(np.max(A / (2 * p * gap))))
    return need


# -- margins -------------------------------------------------------------------------

@dataclass
class MarginTable:
    rows: list

    @property
    def violations(self) -> int:
        return sum(1 for row in self.rows if row["violated"])

    def kinds(self) -> set:
        return {row["kind"] for row in self.rows}

    def select(self, kind: str) -> list:
        return [row for row in self.rows if row["kind"] == kind]


def _fd_log_rate(t, y):
    """Richardson-extrapolated centred differences of ``y(t)`` in log-time at
    interior points; the error estimate is the gap between the two stencils."""
    s = np.log(t)
    h = np.diff(s)
    if not np.allclose(h, h[0], rtol=1e-9):
        raise InsufficientDataError("finite-difference margins need a geometric time grid")
    h = h[0]
    idx = np.arange(2, len(t) - 2)
    d1 = (y[idx + 1] - y[idx - 1]) / (2 * h) / t[idx]
    d2 = (y[idx + 2] - y[idx - 2]) / (4 * h) / t[idx]
    err = np.abs(d1 - d2)
    # the stencil gap can cross zero by accident; take the local maximum
    err = np.maximum(err, np.maximum(np.r_[err[1:], 0.0], np.r_[0.0, err[:-1]]))
    return idx, (4 * d1 - d2) / 3, err


def sr_margins(trace: IterationTrace, C_N: float | None = None) -> MarginTable:
    """Margins (LHS - RHS) of every inequality in the cascade.

    Kinds: ``identity`` (finite-difference rate vs the energy identity),
    ``sr1``/``sr2`` (rate bounds), ``sr3`` (integrated level-0 growth),
    ``sr4``/``sr5`` (Nash-driven rates, the latter with the previous level's
    norm) and ``cascade`` (ratio of successive weights).  A row is violated
    when its margin is positive beyond the finite-difference error estimate.
    """
    t = trace.tgrid
    if len(t) < 5:
        raise InsufficientDataError("margins need at least 5 grid points")
    C_N = trace.C_N if C_N is None else C_N
    dw, lam, r, th = trace.dw, trace.lam, trace.r, trace.theta
    drift = (lam / r) ** dw if lam > 0 else 0.0
    rows = []

    def add(kind, k, j, lhs, rhs, err=0.0, rel=1e-9):
        margin = float(lhs - rhs)
        tol = err + rel * max(1.0, abs(lhs), abs(rhs))
        rows.append({"kind": kind, "k": k, "t": float(t[j]), "lhs": float(lhs), "rhs": float(rhs),
                     "margin": margin, "fd_error": float(err), "violated": margin > tol})

    for rec in trace.levels:
        p = rec.p
        y = 2 * p * np.log(rec.u)
        idx, fd, err = _fd_log_rate(t, y)
        for j, d, e in zip(idx, fd, err):
            add("identity", rec.k, j, d, rec.identity_rate[j], e + 1e-9 * abs(d), rel=0.0)
            add("identity", rec.k, j, -d, -rec.identity_rate[j], e + 1e-9 * abs(d), rel=0.0)
            if rec.k == 0:
                add("sr1", 0, j, d, 2 * trace.C0 * drift, e)
            else:
                add("sr2", rec.k, j, d, -rec.energy[j] + 2 * trace.C0 * drift * p**dw, e)
        if rec.k == 0:
            for j in range(len(t)):
                add("sr3", 0, j, rec.u[j], math.exp(trace.C0 * drift * t[j]))
        else:
            A4 = np.exp(th * p * np.log(rec.lower_ratio))
            prev = trace.levels[rec.k - 1]
            # ||f_{t,k}||_{2p} / ||f_{t,k-1}||_{p_k}; p_k = 2p_{k-1} is prev's norm index
            A5 = np.exp(th * p * np.log(rec.u / prev.u))
            B = trace.C0 * p ** (dw - 1) * drift
            for j, d, e in zip(idx, fd / (2 * p), err / (2 * p)):
                add("sr4", rec.k, j, d, -A4[j] / (2 * C_N * p) + B, e)
                add("sr5", rec.k, j, d, -A5[j] / (trace.C_A(C_N) * p) + B, e)
    for k in range(1, len(trace.levels)):
        lo, hi = trace.levels[k - 1], trace.levels[k]
        bound = cascade_ratio_bound(trace, k, C_N)
        for j in range(len(t)):
            add("cascade", k, j, hi.w[j] / lo.w[j], bound[j])
    return MarginTable(rows)


def cascade_ratio_bound(trace: IterationTrace, k: int, C_N: float | None = None) -> np.ndarray:
    """Bound on ``w_{k+1}(t) / w_k(t)`` implied by the differential inequality.

    With ``p = p_k``: ``(2 p^dw / (eps theta))^{1/(theta p)} exp(delta t / p)``.
    The time powers cancel because ``w_{k+1}`` carries the weight
    ``t^{(p-1)/(theta p)}``.
    """
    p = 2.0**k
    eps = 1.0 / trace.C_A(C_N)
    th = trace.theta
    base = math.exp((math.log(2) + trace.dw * math.log(p) - math.log(eps * th)) / (th * p))
    return base * np.exp(trace.delta * trace.tgrid / p)


def write_trace_csv(trace: IterationTrace, table: MarginTable, path) -> None:
    """Columns ``k,t,u,w,margin``; margin is the level's rate-inequality margin."""
    by = {}
    for row in table.rows:
        if row["kind"] in ("sr1", "sr2"):
            by[(row["k"], row["t"])] = row["margin"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "u", "w", "margin"])
        for rec in trace.levels:
            for j, t in enumerate(trace.tgrid):
                m = by.get((rec.k, float(t)), float("nan"))
                w.writerow([rec.k, repr(float(t)), repr(float(rec.u[j])), repr(float(rec.w[j])), repr(m)])


# -- differential inequality ----------------------------------------------------------

class TabulatedWeight:
    """Piecewise-linear non-decreasing weight, constant beyond its table."""

    def __init__(self, t, values):
        self.t = np.asarray(t, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if np.any(np.diff(self.t) <= 0):
            raise DomainError("weight abscissae must increase")
        if np.any(np.diff(self.values) < 0) or np.any(self.values <= 0):
            raise DomainError("weight must be positive and non-decreasing")

    def __call__(self, t):
        return np.interp(t, self.t, self.values)


def _constant_weight(c=1.0):
    return lambda t: np.full(np.shape(t), c, dtype=float) if np.ndim(t) else c


@dataclass
class DifeParams:
    eps: float
    theta: float
    delta: float
    dw: float
    p: int
    w: Callable = field(default_factory=_constant_weight)

    def __post_init__(self):
        if not (self.eps > 0 and self.theta > 0 and self.delta > 0):
            raise DomainError("eps, theta and delta must be positive")
        if self.dw < 2:
            raise DomainError("dw must be >= 2")
        if self.p < 2 or (int(self.p) & (int(self.p) - 1)) or self.p != int(self.p):
            raise DomainError("p must be a power of two >= 2")


def dife_bound(params: DifeParams, t: float) -> float:
    """``(2 p^dw / (eps theta))^{1/(theta p)} t^{(1-p)/(theta p)} w(t) e^{delta t / p}``."""
    if not t > 0:
        raise DomainError("dife_bound needs t > 0")
    p, th = params.p, params.theta
    return ((2 * p**params.dw / (params.eps * th)) ** (1 / (th * p))
            * t ** ((1 - p) / (th * p)) * float(params.w(t)) * math.exp(params.delta * t / p))


def dife_bound_log(params: DifeParams, t: float) -> float:
    """Same closed form, assembled as a sum of logarithms."""
    p, th = params.p, params.theta
    lg = (math.log(2) + params.dw * math.log(p) - math.log(params.eps) - math.log(th)) / (th * p)
    lg += (1 - p) / (th * p) * math.log(t) + math.log(float(params.w(t))) + params.delta * t / p
    return math.exp(lg)


def _maximal_solution(params: DifeParams, tmax: float, t_eval):
    """Integrate the equality case started from u(0+) = +inf.

    With ``a = delta p^{dw-1}``, ``B = theta delta p^dw`` and
    ``z = (e^{-a t} u)^{-theta p}`` the equation becomes
    ``z' = eps theta t^{p-2} w^{-theta p} e^{B t}``, ``z(0) = 0``.  Writing
    ``z = e^{B t} t^{p-1} e^y`` and ``s = log t`` gives the regular equation
    ``dy/ds = eps theta w^{-theta p} e^{-y} - (B t + p - 1)`` whose solution
    from ``s = -inf`` starts at ``e^y = eps theta w(0)^{-theta p} / (p - 1)``;
    then ``u = (t^{p-1} e^y)^{-1/(theta p)}``.  Working with ``y`` keeps the
    tolerance relative while ``z e^{-Bt}`` decays by many orders.
    """
    p, th, eps = params.p, params.theta, params.eps
    B = th * params.delta * p**params.dw
    t_eval = np.asarray(t_eval, dtype=float)
    s0 = math.log(t_eval[0]) - 30.0  # start-up error decays like exp(-(p-1) 30)

    def src(t):
        return eps * th * float(params.w(t)) ** (-th * p)

    def rhs(s, y):
        t = math.exp(s)
        return [src(t) * math.exp(-y[0]) - (B * t + p - 1)]

    def jac(s, y):
        return [[-src(math.exp(s)) * math.exp(-y[0])]]

    y0 = math.log(src(0.0) / (p - 1))
    for method in ("LSODA", "Radau"):
        sol = integrate.solve_ivp(rhs, (s0, math.log(tmax)), [y0], method=method, jac=jac,
                                  t_eval=np.log(t_eval), rtol=1e-13, atol=1e-13)
        if sol.success:
            break
        log.warning("maximal-solution solve with %s failed (%s); retrying", method, sol.message)
    if not sol.success:
        raise NumericalError(f"maximal-solution integration failed: {sol.message}")
    logz = (p - 1) * np.log(t_eval) + sol.y[0]
    zeta = np.exp(logz)
    return np.exp(-logz / (th * p)), zeta


def scaled_integral(params: DifeParams, t: float, weighted: bool = False) -> float:
    """``e^{-Bt} int_0^t s^{p-2} [w(s)^{-theta p}] e^{B s} ds`` by adaptive quadrature."""
    p, th = params.p, params.theta
    B = th * params.delta * p**params.dw

    def g(s):
        v = s ** (p - 2) * math.exp(-B * (t - s))
        return v * float(params.w(s)) ** (-th * p) if weighted else v

    pts = [max(0.0, t - k / B) for k in (1, 5, 20, 80)] if B > 0 else None
    pts = sorted(set(x for x in pts if 0 < x < t)) if pts else None
    val, _ = integrate.quad(g, 0.0, t, points=pts, epsabs=0.0, epsrel=1e-12, limit=500)
    return val


def fs2_lower(params: DifeParams, t: float) -> float:
    """Scaled closed-form lower bound ``t^{p-1} / (2 p^dw) e^{-delta theta t}``."""
    p = params.p
    return t ** (p - 1) / (2 * p**params.dw) * math.exp(-params.delta * params.theta * t)


@dataclass
class DifeReport:
    params: DifeParams
    t: np.ndarray
    u: np.ndarray
    bound: np.ndarray
    quad_u: np.ndarray
    fs2_quadrature: np.ndarray
    fs2_closed: np.ndarray

    @property
    def max_relative_excess(self) -> float:
        return float(np.max(self.u / self.bound - 1.0))

    @property
    def bound_violations(self) -> int:
        return int(np.sum(self.u > self.bound * (1 + 1e-6)))

    @property
    def fs2_violations(self) -> int:
        return int(np.sum(self.fs2_quadrature < self.fs2_closed))

    @property
    def ode_quadrature_gap(self) -> float:
        return float(np.max(np.abs(self.u / self.quad_u - 1.0)))


def dife_verify(params: DifeParams, tmax: float, n_points: int = 25) -> DifeReport:
    """Integrate the maximal solution and compare it with the closed-form bound."""
    if not tmax > 0:
        raise DomainError("tmax must be positive")
    ts = np.geomspace(tmax * 1e-3, tmax, n_points)
    u, _ = _maximal_solution(params, tmax, ts)
    bound = np.array([dife_bound(params, t) for t in ts])
    th, p = params.theta, params.p
    quad_u = np.array([(params.eps * th * scaled_integral(params, t, weighted=True)) ** (-1 / (th * p))
                       for t in ts])
    fs2_q = np.array([scaled_integral(params, t) for t in ts])
    fs2_c = np.array([fs2_lower(params, t) for t in ts])
    return DifeReport(params, ts, u, bound, quad_u, fs2_q, fs2_c)


def dife_parameter_grid(df: float = math.log(3) / math.log(2), w=None) -> list:
    """The 48-point grid eps x theta x delta x p x dw used for verification."""
    w = w if w is not None else TabulatedWeight([0.0, 1.0, 2.0, 4.0], [1.0, 1.5, 2.5, 3.0])
    grid = []
    for eps in (0.1, 1.0):
        for dw in (2.0, 2.5):
            for theta in (1.0, 2 * dw / df):
                for delta in (0.1, 1.0):
                    for p in (2, 4, 8):
                        grid.append(DifeParams(eps, theta, delta, dw, p, w))
    return grid


def bernoulli_gap(p: float, dw: float) -> float:
    """``(1 - p^-dw)^{p-1} - (1 - p^-dw (p-1))``; nonnegative for p, dw >= 2."""
    q = p ** (-dw)
    return (1 - q) ** (p - 1) - (1 - q * (p - 1))


# -- closing the argument ------------------------------------------------------------------

def cascade_constant(dw: float, eps: float, theta: float) -> float:
    """``prod_{k>=1} (2^{dw k + 1} / (eps theta))^{1/(theta 2^k)} = (2^{2 dw + 1} / (eps theta))^{1/theta}``."""
    return math.exp((math.log(2) * (2 * dw + 1) - math.log(eps * theta)) / theta)


def cascade_converged(trace: IterationTrace, threshold: float = 0.1) -> float:
    """Max over t of |w_{K+1}/w_K - 1| at the top level."""
    if len(trace.levels) < 2:
        return math.inf
    a, b = trace.levels[-2].w, trace.levels[-1].w
    return float(np.max(np.abs(b / a - 1.0)))


def ultracontractive_bound(trace: IterationTrace, t: float, dual: IterationTrace | None = None,
                           threshold: float = 0.1) -> float:
    """Bound on ``||P_t^{psi}||_{1->inf}`` assembled from the measured constants.

    ``2 -> inf``: ``C2 t^{-1/theta} e^{2 delta t}`` (the level cascade, then the
    level-0 growth); ``1 -> 2`` by duality from the ``-psi`` run; composing at
    ``t/2`` gives ``C2^2 2^{df/dw} t^{-df/dw} e^{2 delta t}``.
    """
    traces = [trace] + ([dual] if dual is not None else [])
    for tr in traces:
        gap = cascade_converged(tr)
        if gap > threshold:
            raise ConvergenceError(f"cascade not converged: top-level weight ratio off by {gap:.3g}")
    th = trace.theta
    C2 = max(cascade_constant(tr.dw, 1.0 / tr.C_A(), th) for tr in traces)
    delta = max(tr.delta for tr in traces)
    trunc = max(tr.truncation_factor for tr in traces)
    return float(trunc * C2**2 * 2 ** (trace.df / trace.dw) * t ** (-trace.df / trace.dw)
                 * math.exp(2 * delta * t))


def exact_one_to_inf(S: SpectralData, trace: IterationTrace, t: float) -> float:
    return float(perturbed_kernel(S, PerturbationSpec(trace.levels[-1].psi), t).max())


def optimal_lambda(dw: float, C4: float, X: float) -> float:
    """Minimiser of ``C4 lam^dw / X - lam``."""
    return (dw * C4) ** (-1.0 / (dw - 1)) * X ** (1.0 / (dw - 1))


def usg_constant_c5(dw: float, C4: float) -> float:
    return dw * C4 * (1 - 1 / dw) ** (-(dw - 1))


def usg_lambda(dw: float, C4: float, d: float, t: float) -> float | None:
    """Amplitude used by :func:`usg_assemble`; ``None`` on the on-diagonal branch."""
    if d <= 0:
        return None
    X = d**dw / t
    if X < C4:
        return None
    return max(1.0, optimal_lambda(dw, C4, X))


def usg_assemble(df: float, dw: float, C3: float, C4: float, d: float, t: float) -> float:
    """Sub-Gaussian bound at distance ``d`` and time ``t``.

    Off-diagonal branch (``d**dw >= C4 t``): ``C3 t^{-df/dw} exp(C4 lam^dw t/d^dw - lam)``
    at ``lam = max(1, lam*)``; for ``lam* >= 1`` this equals
    ``C3 t^{-df/dw} exp(-(d^dw / (C5 t))^{1/(dw-1)})``.  Otherwise the
    on-diagonal value ``C3 t^{-df/dw}``.
    """
    if not t > 0:
        raise DomainError("usg_assemble needs t > 0")
    pref = C3 * t ** (-df / dw)
    lam = usg_lambda(dw, C4, d, t)
    if lam is None:
        return pref
    X = d**dw / t
    return pref * math.exp(C4 * lam**dw / X - lam)


# -- calibration of the sub-Gaussian constants ---------------------------------------------

@dataclass(frozen=True)
class Pair:
    x: int
    y: int
    d: int


@dataclass
class USGCalibration:
    """Constants of ``m_lam(t) <= C3 t^{-df/dw} exp(C4 lam^dw t / d^dw)``.

    ``m_lam(t)`` is the exact ``1 -> inf`` norm of the semigroup conjugated by
    ``lam`` times the saturated drive cutoff of ``B(x, d/2) ⊂ B(x, d)``.
    """

    df: float
    dw: float
    C3: float
    C4: float
    C_diag: float
    rounds: int
    samples: list  # (pair index, t, lam, m)

    @property
    def C5(self) -> float:
        return usg_constant_c5(self.dw, self.C4)

    def bound(self, d: float, t: float) -> float:
        return usg_assemble(self.df, self.dw, self.C3, self.C4, d, t)


def select_pairs(G: WeightedGraph, centers, distances) -> list:
    """For each centre and distance, the lowest-index vertex at exactly that distance."""
    pairs = []
    for x in centers:
        dist = G.distances_from(x)
        for d in distances:
            hits = np.flatnonzero(dist == d)
            if len(hits):
                pairs.append(Pair(int(x), int(hits[0]), int(d)))
    if not pairs:
        raise InsufficientDataError("no pairs at the requested distances")
    return pairs


def pair_cutoff(G: WeightedGraph, pair: Pair, C1hat: float = 1.0, base: str = "harmonic") -> np.ndarray:
    """Top-level (saturated) drive cutoff for the annulus ``B(x, d/2) ⊂ B(x, d)``."""
    r = pair.d / 2.0
    A = AnnulusSpec(pair.x, r, r).validate(G)
    return drive_cutoff(G, A, 2.0**MAX_LEVELS, 1.0, C1hat, base, saturate=True).values


def _conjugated_max(P, psi) -> float:
    q = psi - psi.min()
    return float((np.exp(q)[:, None] * P * np.exp(-q)[None, :]).max())


def pair_times(pair: Pair, tgrid, dw: float) -> np.ndarray:
    t = np.asarray(tgrid)
    return t[(t >= pair.d) & (t <= pair.d**dw)]


def calibrate_usg(S: SpectralData, pairs, tgrid, lam_grid, df: float, dw: float,
                  C1hat: float = 1.0, base: str = "harmonic", c3_factor: float | None = None,
                  max_rounds: int = 50) -> USGCalibration:
    """Measure ``C3`` and the smallest ``C4`` for which the assembled bound holds.

    ``C3`` is ``c3_factor`` (default ``2^{df/dw}``, the duality composition
    factor) times the on-diagonal constant over the grid.  ``C4`` is the
    largest exponent ratio over the amplitude grid, then raised until the
    bound also holds at the amplitudes :func:`usg_assemble` selects.
    """
    from .heat import diagonal_sup, kernel_matrix

    alpha = df / dw
    tgrid = np.asarray(sorted(set(float(t) for t in tgrid)))
    lam_grid = [float(v) for v in lam_grid]
    if not lam_grid or min(lam_grid) < 1:
        raise DomainError("amplitude grid must be nonempty with entries >= 1")
    G = S.graph
    phis = [pair_cutoff(G, pr, C1hat, base) for pr in pairs]
    times = sorted({t for pr in pairs for t in pair_times(pr, tgrid, dw)})
    if not times:
        raise InsufficientDataError("no grid times inside [d, d^dw] for any pair")
    C_diag = max(diagonal_sup(S, t) * t**alpha for t in times)
    C3 = (2**alpha if c3_factor is None else c3_factor) * C_diag

    kernels = {}

    def kernel(t):
        if t not in kernels:
            kernels[t] = kernel_matrix(S, t)
        return kernels[t]

    samples, C4 = [], 1e-6
    for t in times:
        P = kernel(t)
        for i, pr in enumerate(pairs):
            if not pr.d <= t <= pr.d**dw:
                continue
            for lam in lam_grid:
                m = _conjugated_max(P, lam * phis[i])
                samples.append((i, t, lam, m))
                C4 = max(C4, math.log(m * t**alpha / C3) * pr.d**dw / (lam**dw * t))
    rounds = 0
    while rounds < max_rounds:
        rounds += 1
        raised = False
        for i, pr in enumerate(pairs):
            for t in pair_times(pr, tgrid, dw):
                lam = usg_lambda(dw, C4, pr.d, t)
                if lam is None:
                    continue
                m = _conjugated_max(kernel(t), lam * phis[i])
                need = math.log(m * t**alpha / C3) * pr.d**dw / (lam**dw * t)
                if need > C4:
                    C4 = need * (1 + 1e-9)
                    raised = True
        if not raised:
            break
    else:
        raise ConvergenceError(f"C4 calibration did not settle in {max_rounds} rounds")
    return USGCalibration(df, dw, C3, C4, C_diag, rounds, samples)


def usg_domination(S: SpectralData, cal: USGCalibration, pairs, tgrid, lam_grid=(),
                   C1hat: float = 1.0, base: str = "harmonic") -> dict:
    """Check ``p_t(x, y)`` against the assembled bound and the per-amplitude
    off-diagonal bounds on every grid point; returns counts and worst ratios."""
    from .heat import kernel_matrix

    G = S.graph
    phis = [pair_cutoff(G, pr, C1hat, base) for pr in pairs]
    rows, usg_bad, off_bad, worst = [], 0, 0, 0.0
    for t in sorted(set(float(t) for t in tgrid)):
        P = None
        for i, pr in enumerate(pairs):
            if not pr.d <= t <= pr.d**cal.dw:
                continue
            if P is None:
                P = kernel_matrix(S, t)
            exact = float(P[pr.x, pr.y])
            b = cal.bound(pr.d, t)
            worst = max(worst, exact / b)
            usg_bad += exact > b
            for lam in lam_grid:
                psi = lam * phis[i]
                m = _conjugated_max(P, psi)
                off = m * math.exp(psi[pr.y] - psi[pr.x])
                off_bad += exact > off * (1 + 1e-12)
            rows.append((i, pr.d, t, exact, b))
    return {"points": len(rows), "usg_violations": int(usg_bad),
            "offdiag_violations": int(off_bad), "worst_ratio": worst, "rows": rows}
