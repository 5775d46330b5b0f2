"""Spectral heat semigroup of a weighted graph.

The generator ``L = M^-1 K`` (``K`` the stiffness matrix, ``M = diag(mu)``) is
symmetric in ``L^2(mu)``.  A dense eigensolve of ``M^-1/2 K M^-1/2`` gives
mu-orthonormal eigenfunctions ``phi_i``, and

    p_t(x, y) = sum_i exp(-lambda_i t) phi_i(x) phi_i(y)

is the heat kernel with respect to ``mu``.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, DomainError, InsufficientDataError, NumericalError
from .graph import ScalingFit, WeightedGraph, dirichlet_energy, lp_norm, power_law_fit

log = logging.getLogger(__name__)

SPECTRAL_MAX_VERTICES = 4000


@dataclass(frozen=True)
class SpectralData:
    graph: WeightedGraph
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # columns, mu-orthonormal

    @property
    def mu(self) -> np.ndarray:
        return self.graph.mu

    def coefficients(self, f) -> np.ndarray:
        return self.eigenfunctions.T @ (self.mu * f)

    def evolve(self, f, t) -> np.ndarray:
        """``P_t f``; ``t`` may be a 1-d array, giving one column per time."""
        c = self.coefficients(np.asarray(f, dtype=float))
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return self.eigenfunctions @ (np.exp(-self.eigenvalues * t) * c)
        return self.eigenfunctions @ (np.exp(-np.outer(self.eigenvalues, t)) * c[:, None])

    def time_derivative(self, f, t) -> np.ndarray:
        """``d/dt P_t f = -L P_t f``, evaluated spectrally."""
        c = self.coefficients(np.asarray(f, dtype=float))
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return -self.eigenfunctions @ (self.eigenvalues * np.exp(-self.eigenvalues * t) * c)
        w = self.eigenvalues[:, None] * np.exp(-np.outer(self.eigenvalues, t))
        return -self.eigenfunctions @ (w * c[:, None])


def spectral_decompose(G: WeightedGraph) -> SpectralData:
    """Dense symmetric eigensolve of the mu-symmetric generator."""
    if G.n > SPECTRAL_MAX_VERTICES:
        raise ConfigurationError(
            f"spectral_decompose handles at most {SPECTRAL_MAX_VERTICES} vertices, got {G.n}")
    s = 1.0 / np.sqrt(G.mu)
    A = G.stiffness().toarray() * s[:, None] * s[None, :]
    try:
        lam, V = linalg.eigh(A, check_finite=False)
    except linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"eigensolve failed: {exc}") from exc
    phi = V * s[:, None]
    # pin the ground state to the positive constant
    phi[:, 0] = 1.0 / np.sqrt(G.total_mass)
    lam[0] = 0.0
    if lam.min() < -1e-10:
        raise NumericalError(f"negative eigenvalue {lam.min():.3e}")
    lam = np.maximum(lam, 0.0)
    for j in range(1, phi.shape[1]):
        k = np.argmax(np.abs(phi[:, j]))
        if phi[k, j] < 0:
            phi[:, j] = -phi[:, j]
    return SpectralData(G, lam, phi)


def orthonormality_residual(S: SpectralData) -> float:
    Phi = S.eigenfunctions
    return float(np.max(np.abs(Phi.T @ (S.mu[:, None] * Phi) - np.eye(Phi.shape[1]))))


def reconstruction_residual(S: SpectralData) -> float:
    """max |L - Phi diag(lambda) Phi^T M| over matrix entries."""
    G = S.graph
    L = G.stiffness().toarray() / G.mu[:, None]
    Phi = S.eigenfunctions
    return float(np.max(np.abs(L - (Phi * S.eigenvalues) @ (Phi.T * G.mu[None, :]))))


@dataclass(frozen=True)
class HeatKernel:
    t: float
    values: np.ndarray  # p_t(x, y), density against mu

    def apply(self, f, mu) -> np.ndarray:
        return self.values @ (mu * f)


def kernel_matrix(S: SpectralData, t: float) -> np.ndarray:
    Phi = S.eigenfunctions
    return (Phi * np.exp(-S.eigenvalues * t)) @ Phi.T


def heat_kernel(S: SpectralData, t: float, check: bool = True) -> HeatKernel:
    """``p_t`` as a dense matrix; invariants are asserted when ``check`` is set."""
    if not t > 0:
        raise DomainError(f"heat kernel needs t > 0, got {t}")
    P = kernel_matrix(S, t)
    P = 0.5 * (P + P.T)
    if check:
        if np.max(np.abs(P @ S.mu - 1.0)) > 1e-10:
            raise NumericalError("heat kernel not conservative to 1e-10")
        if P.min() < -1e-12:
            raise NumericalError(f"heat kernel entry {P.min():.3e} below -1e-12")
    return HeatKernel(float(t), P)


def semigroup_residual(S: SpectralData, t: float, s: float) -> float:
    """max |p_{t+s} - p_t * p_s| with the composition taken against mu."""
    Pt = heat_kernel(S, t).values
    Ps = heat_kernel(S, s).values
    Pts = heat_kernel(S, t + s).values
    return float(np.max(np.abs(Pts - (Pt * S.mu[None, :]) @ Ps)))


def time_window(G: WeightedGraph, dw: float) -> tuple[float, float]:
    return 1.0, float(G.diameter()) ** dw


def diagonal_sup(S: SpectralData, t: float) -> float:
    d = (S.eigenfunctions**2) @ np.exp(-S.eigenvalues * t)
    return float(d.max())


def ondiagonal_profile(S: SpectralData, tgrid, df: float, dw: float) -> ScalingFit:
    """Scan ``sup_x p_t(x, x) * t**(df/dw)`` over ``tgrid``.

    ``exponent`` is the fitted decay rate of ``sup_x p_t(x, x)`` (about
    ``-df/dw``); ``c_high`` is the on-diagonal constant over the grid.
    """
    tgrid = np.asarray(sorted(float(t) for t in tgrid))
    if len(tgrid) == 0:
        raise InsufficientDataError("empty time grid")
    t_min, t_max = time_window(S.graph, dw)
    if tgrid[0] < t_min - 1e-12 or tgrid[-1] > t_max * (1 + 1e-12):
        raise DomainError(f"time grid must lie in [{t_min}, {t_max:.4g}]")
    sups = np.array([diagonal_sup(S, t) for t in tgrid])
    scaled = sups * tgrid ** (df / dw)
    if len(tgrid) >= 2:
        fit = power_law_fit(tgrid, sups)
        exponent, rms, r2, resid = fit.exponent, fit.residual_rms, fit.r_squared, fit.residuals
    else:
        exponent, rms, r2, resid = -df / dw, 0.0, 1.0, np.zeros(1)
    return ScalingFit(exponent=exponent, c_low=float(scaled.min()), c_high=float(scaled.max()),
                      residual_rms=rms, r_squared=r2,
                      samples=list(zip(tgrid.tolist(), scaled.tolist())), residuals=resid)


# -- Nash inequality -----------------------------------------------------------

@dataclass
class NashEstimate:
    """Largest Nash ratio over a test family, with the on-diagonal cross-check."""

    constant: float
    ondiagonal_constant: float | None
    ratios: np.ndarray
    excluded: int

    def __float__(self):
        return self.constant


def nash_ratio(G: WeightedGraph, f, df: float, dw: float) -> float:
    """||f||_2^{2(1+dw/df)} / (E(f, f) ||f||_1^{2 dw/df})."""
    e = dirichlet_energy(G, f)
    n1 = lp_norm(f, G.mu, 1)
    n2 = lp_norm(f, G.mu, 2)
    a = dw / df
    # normalise to dodge overflow in large powers
    s = n1
    return float((n2 / s) ** (2 * (1 + a)) * s**2 / e)


def nash_family(S: SpectralData, centers=None, n_eig: int = 10, dw: float = 2.0) -> list:
    """Default test family: heat-kernel columns, low eigenfunctions, radial bumps.

    The ordering is fixed (columns, then eigenfunctions, then bumps) so the
    estimate is reproducible.
    """
    G = S.graph
    diam = G.diameter()
    if centers is None:
        centers = [0, G.n // 2, G.n - 1]
    fam = []
    for x in centers:
        for frac in (1 / 16, 1 / 8, 1 / 4, 1 / 2):
            s = (frac * diam) ** dw
            fam.append(heat_kernel(S, s, check=False).values[x])
    for j in range(1, min(n_eig, G.n - 1) + 1):
        fam.append(S.eigenfunctions[:, j].copy())
    for x in centers:
        d = G.distances_from(x)
        for frac in (1 / 8, 1 / 4, 1 / 2):
            rad = max(1.0, frac * diam)
            fam.append(np.clip(1.0 - d / rad, 0.0, None))
    return fam


def nash_constant_estimate(G: WeightedGraph, df: float, dw: float, family,
                           ondiag_constant: float | None = None) -> NashEstimate:
    """Maximise the Nash ratio over ``family``.

    Functions with zero energy (constants) are skipped with a warning.  If the
    on-diagonal constant ``C`` of ``sup_x p_t(x, x) <= C t^{-df/dw}`` is given,
    the constant it implies through the standard semigroup argument is also
    reported.
    """
    family = list(family)
    if not family:
        raise InsufficientDataError("Nash test family is empty")
    ratios, excluded = [], 0
    for f in family:
        f = G.check_function(f)
        if not np.any(f):
            raise DomainError("the zero function is not admissible")
        if dirichlet_energy(G, f) <= 1e-14 * max(1.0, float(np.sum(f * f * G.mu))):
            warnings.warn("skipping a zero-energy (constant) test function", stacklevel=2)
            excluded += 1
            continue
        ratios.append(nash_ratio(G, f, df, dw))
    if not ratios:
        raise InsufficientDataError("no admissible Nash test functions")
    alt = None
    if ondiag_constant is not None:
        alpha = df / dw
        alt = (1 + 1 / alpha) ** (1 + 1 / alpha) * (alpha * ondiag_constant) ** (1 / alpha)
    ratios = np.array(ratios)
    return NashEstimate(float(ratios.max()), alt, ratios, excluded)


def contraction_ratios(S: SpectralData, f, t: float) -> dict:
    """``||P_t f||_p / ||f||_p`` for p in {1, 2, inf}."""
    g = S.evolve(f, t)
    return {p: lp_norm(g, S.mu, p) / lp_norm(f, S.mu, p) for p in (1, 2, np.inf)}


def write_kernel_csv(S: SpectralData, times, path, vertices=None) -> None:
    """Columns ``t,x,y,p`` in lexicographic order."""
    verts = range(S.graph.n) if vertices is None else sorted(vertices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "p"])
        for t in sorted(times):
            P = heat_kernel(S, t).values
            for x in verts:
                for y in verts:
                    w.writerow([repr(float(t)), x, y, repr(float(P[x, y]))])
