"""Exponentially conjugated semigroups ``P^psi_t f = e^psi P_t(e^-psi f)``."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AmplitudeError, DomainError
from .graph import WeightedGraph, dirichlet_energy, energy_measure, signed_power
from .heat import SpectralData, kernel_matrix

# lambda * sup(phi) above this leaves comfortable floating range
AMPLITUDE_CAP = 200.0


@dataclass(frozen=True)
class PerturbationSpec:
    """Exponent ``psi``; ``amplitude`` is lambda when ``psi = lambda * phi``."""

    psi: np.ndarray
    amplitude: float | None = None

    @classmethod
    def from_cutoff(cls, phi, lam: float) -> "PerturbationSpec":
        values = getattr(phi, "values", phi)
        return cls(lam * np.asarray(values, dtype=float), float(lam))

    def __post_init__(self):
        if not np.all(np.isfinite(self.psi)):
            raise DomainError("psi must be finite")
        spread = float(self.psi.max() - self.psi.min())
        if spread > AMPLITUDE_CAP:
            raise AmplitudeError(
                f"psi oscillation {spread:.4g} exceeds the cap {AMPLITUDE_CAP}; "
                f"reduce lambda below {AMPLITUDE_CAP / max(spread, 1e-300) * (self.amplitude or 1):.4g}")

    def normalized(self) -> np.ndarray:
        """``psi - min psi``; the semigroup does not see additive constants."""
        return self.psi - self.psi.min()

    def negate(self) -> "PerturbationSpec":
        return PerturbationSpec(-self.psi, self.amplitude)


def _as_spec(psi) -> PerturbationSpec:
    return psi if isinstance(psi, PerturbationSpec) else PerturbationSpec(np.asarray(psi, float))


def perturb_apply(S: SpectralData, psi, t, f) -> np.ndarray:
    """``e^psi P_t(e^-psi f)``; vectorised over an array of times."""
    if np.any(np.asarray(t) <= 0):
        raise DomainError("perturbed semigroup needs t > 0")
    spec = _as_spec(psi)
    q = spec.normalized()
    f = S.graph.check_function(f)
    g = S.evolve(np.exp(-q) * f, t)
    scale = np.exp(q)
    return scale * g if g.ndim == 1 else scale[:, None] * g


def perturb_derivative(S: SpectralData, psi, t, f) -> np.ndarray:
    spec = _as_spec(psi)
    q = spec.normalized()
    g = S.time_derivative(np.exp(-q) * f, t)
    scale = np.exp(q)
    return scale * g if g.ndim == 1 else scale[:, None] * g


def perturbed_kernel(S: SpectralData, psi, t: float) -> np.ndarray:
    """Kernel of ``P^psi_t`` against mu: ``e^{psi(x)} p_t(x, y) e^{-psi(y)}``.

    Not symmetric unless psi is constant.
    """
    if t <= 0:
        raise DomainError("perturbed kernel needs t > 0")
    q = _as_spec(psi).normalized()
    P = kernel_matrix(S, t)
    return np.exp(q)[:, None] * P * np.exp(-q)[None, :]


def one_to_inf_norm(S: SpectralData, psi, t: float) -> float:
    """``||P^psi_t||_{1 -> inf}`` = largest kernel entry (the kernel is positive)."""
    return float(perturbed_kernel(S, psi, t).max())


# -- the key inequality ---------------------------------------------------------------

def key_margin_density(G: WeightedGraph, f, psi, p: float) -> np.ndarray:
    """Vertex density of ``E(e^psi f^{2p-1}, e^-psi f) - E(f^p, f^p)/p + p int f^{2p} dGamma(psi)``."""
    f = G.check_function(f)
    if np.any(f < 0):
        raise DomainError("key inequality needs f >= 0")
    if p < 1:
        raise DomainError("key inequality needs p >= 1")
    psi = _as_spec(psi).psi
    a = np.exp(psi) * f ** (2 * p - 1)
    b = np.exp(-psi) * f
    fp = f**p
    return (energy_measure(G, a, b).density
            - energy_measure(G, fp).density / p
            + p * f ** (2 * p) * energy_measure(G, psi).density)


def key_inequality_margin(G: WeightedGraph, f, psi, p: float) -> float:
    """Signed margin of the key inequality; nonnegative for strongly local forms."""
    f = G.check_function(f)
    if np.any(f < 0):
        raise DomainError("key inequality needs f >= 0")
    psi = _as_spec(psi).psi
    a = np.exp(psi) * f ** (2 * p - 1)
    b = np.exp(-psi) * f
    fp = f**p
    return (dirichlet_energy(G, a, b) - dirichlet_energy(G, fp) / p
            + p * float(np.dot(f ** (2 * p), energy_measure(G, psi).density)))


def key_negative_part(G: WeightedGraph, f, psi, p: float) -> float:
    """Sum over vertices of the negative part of the margin density."""
    return float(np.sum(np.maximum(0.0, -key_margin_density(G, f, psi, p))))


def edgewise_convexity_gap(a, b, p: float):
    """``(a^{2p-1} - b^{2p-1})(a - b) - (a^p - b^p)^2 / p``, nonnegative for a, b >= 0."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return (a ** (2 * p - 1) - b ** (2 * p - 1)) * (a - b) - (a**p - b**p) ** 2 / p


def cauchy_schwarz_gap(G: WeightedGraph, f, psi, p: float) -> float:
    """``int f^{2(p-1)} dGamma(f) + int f^{2p} dGamma(psi) - 2 int f^{2p-1} dGamma(f, psi)``."""
    f = G.check_function(f)
    psi = _as_spec(psi).psi
    return float(np.dot(f ** (2 * (p - 1)), energy_measure(G, f).density)
                 + np.dot(f ** (2 * p), energy_measure(G, psi).density)
                 - 2 * np.dot(signed_power(f, 2 * p - 1), energy_measure(G, f, psi).density))


def offdiag_bound_assemble(m_psi: float, psi, x: int, y: int) -> float:
    """``m_psi * exp(psi(y) - psi(x))`` bounds ``p_t(x, y)`` when ``m_psi >= ||P^psi_t||_{1->inf}``."""
    q = _as_spec(psi).psi
    return float(m_psi * np.exp(q[y] - q[x]))


def write_margin_csv(rows, path) -> None:
    """Rows of ``(p, lambda, t, margin, negative_part)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "lambda", "t", "margin", "negative_part"])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
