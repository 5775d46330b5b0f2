"""Fits of sampled heat kernels to the sub-Gaussian form

    p_t(x, y) ~ C1 t^{-df/dw} exp(-C2 (d^dw / t)^{1/(dw-1)}).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import InsufficientDataError

log = logging.getLogger(__name__)

MIN_SAMPLES = 20


@dataclass(frozen=True)
class KernelSample:
    pair_id: int
    x: int
    y: int
    d: float
    t: float
    p: float


@dataclass
class SubGaussianFit:
    prefactor_exponent: float   # free fit of the t-power, about df/dw
    stretched_exponent: float   # free fit of the exponent on d^dw/t, about 1/(dw-1)
    C1: float
    C2: float
    r_squared: float
    residuals: np.ndarray       # per used sample, linearised fit
    used: np.ndarray            # indices into the sample list
    weights: np.ndarray
    gate: float

    def __post_init__(self):
        assert self.stretched_exponent > 0
        assert 0.0 <= self.r_squared <= 1.0


def _weighted_lstsq(A, y, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    resid = y - A @ coef
    return coef, resid, float(np.sum(w * resid**2))


def fit_subgaussian(samples, df: float, dw: float, gate: float = 1.0) -> SubGaussianFit:
    """Regress ``-log(p t^{df/dw})`` on ``(d^dw/t)^{1/(dw-1)}``.

    Samples must satisfy ``d <= t <= d^dw``; only those with
    ``X = d^dw / t >= gate`` are used, weighted by ``log(X/gate) / (1 + log(X/gate))``
    so points close to the branch point count less.  Nonpositive kernel values
    are dropped with a warning.
    """
    samples = list(samples)
    alpha, beta = df / dw, 1.0 / (dw - 1.0)
    if gate < 1:
        raise InsufficientDataError("gate must be >= 1 (exponential branch needs d^dw >= t)")
    d = np.array([s.d for s in samples], dtype=float)
    t = np.array([s.t for s in samples], dtype=float)
    p = np.array([s.p for s in samples], dtype=float)
    if np.any(p <= 0):
        warnings.warn(f"dropping {int(np.sum(p <= 0))} nonpositive kernel samples", stacklevel=2)
    X = d**dw / np.where(t > 0, t, np.nan)
    ok = (p > 0) & (t >= d) & (t <= d**dw) & (X >= gate) & (d > 0)
    idx = np.flatnonzero(ok)
    if len(idx) < MIN_SAMPLES:
        raise InsufficientDataError(f"sub-Gaussian fit needs >= {MIN_SAMPLES} samples, got {len(idx)}")
    if len(np.unique(t[idx])) < 2 or len(np.unique(X[idx])) < 3:
        raise InsufficientDataError("sub-Gaussian fit needs samples at several times and scales")
    X, t, p = X[idx], t[idx], p[idx]
    u = np.log(X / gate)
    w = u / (1 + u)
    w = np.where(w > 0, w, 0.5 * np.min(w[w > 0]) if np.any(w > 0) else 1.0)
    y = -np.log(p * t**alpha)

    A = np.c_[np.ones_like(X), X**beta]
    coef, resid, rss = _weighted_lstsq(A, y, w)
    ybar = np.average(y, weights=w)
    tss = float(np.sum(w * (y - ybar) ** 2))
    r2 = min(1.0, max(0.0, 1.0 - rss / tss)) if tss > 0 else 0.0

    def profile_rss(g):
        return _weighted_lstsq(np.c_[np.ones_like(X), X**g], y, w)[2]

    lo, hi = 0.05, 5.0
    res = optimize.minimize_scalar(profile_rss, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-8})
    gamma = float(res.x)
    if min(gamma - lo, hi - gamma) < 1e-3:
        warnings.warn(f"stretched exponent {gamma:.4g} sits at the search bound", stacklevel=2)

    # t-power left free: log p = c - a log t - c2 X^beta
    B = np.c_[np.ones_like(X), -np.log(t), -(X**beta)]
    free, _, _ = _weighted_lstsq(B, np.log(p), w)
    return SubGaussianFit(prefactor_exponent=float(free[1]), stretched_exponent=gamma,
                          C1=math.exp(-coef[0]), C2=float(coef[1]), r_squared=r2,
                          residuals=resid, used=idx, weights=w, gate=float(gate))


def kernel_samples(S, pairs, tgrid, dw: float) -> list:
    """Exact ``p_t(x, y)`` for every pair at every grid time in ``[d, d^dw]``.

    Only the requested entries are formed, one spectral sum per pair.
    """
    Phi = S.eigenfunctions
    xs = np.array([pr.x for pr in pairs], dtype=int)
    ys = np.array([pr.y for pr in pairs], dtype=int)
    prod = Phi[xs] * Phi[ys]  # (pairs, modes)
    out = []
    for t in sorted(set(float(v) for v in tgrid)):
        live = [i for i, pr in enumerate(pairs) if pr.d <= t <= pr.d**dw]
        if not live:
            continue
        vals = prod[live] @ np.exp(-S.eigenvalues * t)
        for i, v in zip(live, vals):
            pr = pairs[i]
            out.append(KernelSample(i, pr.x, pr.y, float(pr.d), t, float(v)))
    out.sort(key=lambda s: (s.pair_id, s.t))
    return out
