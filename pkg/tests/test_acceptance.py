"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end
of the run (see the terminal summary hook in conftest)."""
import math
import time

import numpy as np
import pytest

from conftest import DF_GASKET, DW_GASKET, gasket, lattice, vicsek
from davieslab.builders import fit_walk_dimension, mean_exit_times, sierpinski_point
from davieslab.config import ExperimentConfig
from davieslab.cutoff import AnnulusSpec, csa_frontier, harmonic_cutoff, sip_construct
from davieslab.graph import (ahlfors_fit, dirichlet_energy, energy_measure, inner,
                             laplacian_apply)
from davieslab.heat import contraction_ratios, kernel_matrix, spectral_decompose
from davieslab.iteration import (calibrate_usg, dife_parameter_grid, dife_verify, geometric_grid,
                                 select_pairs, usg_domination)
from davieslab.perturb import key_negative_part, perturb_apply, perturbed_kernel
from davieslab.pipeline import run_pipeline
from profiles import SIDES, key_suite

criterion = pytest.mark.criterion


def rel_gap(a, b, *scale):
    return abs(a - b) / max(1e-300, max(abs(a), abs(b), *map(abs, scale)))


@criterion(1, "exact discrete identities at 1e-12")
def test_exact_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for G in (gasket(4), lattice(2, 12), vicsek(2)):
        for _ in range(200):
            f, h = rng.standard_normal((2, G.n))
            lhs = energy_measure(G, f).integrate(h)
            a, b = dirichlet_energy(G, f, f * h), 0.5 * dirichlet_energy(G, f * f, h)
            worst["energy identity"] = max(worst.get("energy identity", 0), rel_gap(lhs, a - b, a, b))
            Lf, Lh = laplacian_apply(G, f), laplacian_apply(G, h)
            e = dirichlet_energy(G, f, h)
            worst["adjointness"] = max(worst.get("adjointness", 0),
                                       rel_gap(inner(G, Lf, h), inner(G, f, Lh), e),
                                       rel_gap(inner(G, Lf, h), e))
    for G in (gasket(4), lattice(2, 12), vicsek(2)):
        S = spectral_decompose(G)
        for t in (0.5, 4.0):
            psi = rng.uniform(0, 4, G.n)
            K = perturbed_kernel(S, psi, t)
            scale = np.max(np.abs(K))
            cols = np.column_stack([perturb_apply(S, psi, t, np.eye(G.n)[y] / G.mu[y]) for y in range(G.n)])
            worst["conjugation"] = max(worst.get("conjugation", 0), np.max(np.abs(K - cols)) / scale)
            gauge = perturbed_kernel(S, psi + 7.3, t)
            worst["gauge"] = max(worst.get("gauge", 0), np.max(np.abs(K - gauge)) / scale)
            adj = perturbed_kernel(S, -psi, t)
            worst["adjoint"] = max(worst.get("adjoint", 0), np.max(np.abs(K - adj.T)) / scale)
    elapsed = time.perf_counter() - start
    print(worst, f"{elapsed:.2f}s")
    assert all(v <= 1e-12 for v in worst.values()), worst
    assert elapsed < 10.0


@criterion(2, "heat-kernel contracts at 1e-8")
def test_heat_kernel_contracts():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    # the largest lattice the dense eigensolver accepts in a regular run
    for G in (gasket(5), lattice(2, 48)):
        S = spectral_decompose(G)
        for t, s in ((0.3, 0.7), (2.0, 5.0)):
            Pt, Ps, Pts = kernel_matrix(S, t), kernel_matrix(S, s), kernel_matrix(S, t + s)
            assert np.max(np.abs(Pt - Pt.T)) <= 1e-8
            assert np.max(np.abs(Pt @ S.mu - 1.0)) <= 1e-8
            assert np.max(np.abs(Pts - (Pt * S.mu) @ Ps)) <= 1e-8
        for _ in range(20):
            f = rng.standard_normal(G.n)
            for p, v in contraction_ratios(S, f, float(rng.uniform(0.1, 50))).items():
                assert v <= 1.0 + 1e-8, (G.name, p)
    elapsed = time.perf_counter() - start
    print(f"{elapsed:.2f}s")
    assert elapsed < 60.0


@criterion(3, "self-improvement deviation at most 2 rho")
def test_sip_deviation():
    G = gasket(6)
    centres = [sierpinski_point(G, 0.5, 0.0), sierpinski_point(G, 0.25, 0.25)]
    violations, checked = 0, 0
    for x in centres:
        for R, r in ((16, 16), (8, 16), (8, 24)):
            A = AnnulusSpec(x, float(R), float(r)).validate(G)
            for base in ("harmonic", "linear"):
                for rho in (1 / 2, 1 / 4, 1 / 8, 1 / 16):
                    cf = sip_construct(G, A, rho, base)
                    checked += 1
                    violations += cf.info["max_deviation"] > 2 * rho
    print(f"{checked} constructions, {violations} violations")
    assert violations == 0


@criterion(4, "differential-inequality bound on the 48-point grid")
def test_dife_grid():
    start = time.perf_counter()
    grid = dife_parameter_grid()
    assert len(grid) == 48
    bound_bad = fs2_bad = 0
    worst = -math.inf
    for params in grid:
        rep = dife_verify(params, 10.0)
        bound_bad += rep.bound_violations
        fs2_bad += rep.fs2_violations
        worst = max(worst, rep.max_relative_excess)
    elapsed = time.perf_counter() - start
    print(f"max relative excess {worst:.3g}, {bound_bad} bound and {fs2_bad} quadrature violations, "
          f"{elapsed:.2f}s")
    assert bound_bad == 0 and fs2_bad == 0
    assert worst <= 1e-6
    assert elapsed < 30.0


@criterion(5, "walk and volume dimension fits")
def test_scaling_exponents():
    start = time.perf_counter()
    L = lattice(2, 64)
    c = L.n // 2 + 32
    dw_lat = fit_walk_dimension([mean_exit_times(L, c, [2, 4, 8, 16, 24])]).exponent
    df_lat = ahlfors_fit(L, [c], [8, 12, 16, 20, 24, 30]).exponent
    G = gasket(6)
    x = sierpinski_point(G, 0.5, 0.0)
    dw_gas = fit_walk_dimension([mean_exit_times(G, x, [2, 4, 8, 16, 32])]).exponent
    df_gas = ahlfors_fit(G, [x], [4, 8, 16, 32]).exponent
    elapsed = time.perf_counter() - start
    print(f"lattice dw {dw_lat:.4f} df {df_lat:.4f}; gasket dw {dw_gas:.4f} df {df_gas:.4f}; {elapsed:.2f}s")
    assert 1.9 <= dw_lat <= 2.1
    assert 2.2 <= dw_gas <= 2.45
    assert abs(df_lat - 2.0) <= 0.1
    assert abs(df_gas - DF_GASKET) <= 0.1
    assert elapsed < 60.0


@criterion(6, "cutoff Sobolev constant stable across levels")
def test_csa_stability():
    values = []
    for level in (4, 5, 6):
        G = gasket(level)
        R = 2.0 ** (level - 2)
        A = AnnulusSpec(sierpinski_point(G, 0.5, 0.0), R, R).validate(G)
        front = csa_frontier(G, harmonic_cutoff(G, A), A, DW_GASKET, C1grid=(1.0,), n_validate=100)
        pair = front.pairs[0]
        assert pair.violations == 0
        values.append(pair.C2)
    print("C2(1) by level:", values)
    assert min(values) > 0
    assert max(values) / min(values) < 2.0


@criterion(7, "assembled sub-Gaussian bound dominates the heat kernel")
def test_usg_domination():
    start = time.perf_counter()
    G = gasket(6)
    S = spectral_decompose(G)
    centres = [sierpinski_point(G, a, b) for a, b in ((0.5, 0.0), (0.25, 0.25), (0.5, 0.25))]
    pairs = select_pairs(G, centres, range(8, 33, 4))
    assert min(p.d for p in pairs) >= 8 and max(p.d for p in pairs) <= 32
    tgrid = geometric_grid(8.0, 32.0**DW_GASKET)
    lam_grid = (1, 2, 4, 8, 16, 32)
    cal = calibrate_usg(S, pairs, tgrid, lam_grid, DF_GASKET, DW_GASKET)
    rep = usg_domination(S, cal, pairs, tgrid, lam_grid)
    elapsed = time.perf_counter() - start
    print(f"C3 {cal.C3:.4g} C4 {cal.C4:.4g} C5 {cal.C5:.4g}; {len(pairs)} pairs, {rep['points']} points, "
          f"{rep['usg_violations']} violations, worst ratio {rep['worst_ratio']:.3g}, {elapsed:.1f}s")
    assert rep["points"] > 0
    assert rep["usg_violations"] == 0
    assert rep["offdiag_violations"] == 0
    assert elapsed < 300.0


@criterion(8, "stretched-exponent recovery")
@pytest.mark.parametrize("kw", [dict(builder="sierpinski", level=6),
                                dict(builder="lattice", dim=2, side=48)], ids=["gasket", "lattice"])
def test_subgaussian_exponent(kw):
    cfg = ExperimentConfig(**kw)
    _, dw = cfg.dimensions()
    bundle = run_pipeline(cfg, ["fit"], out=None)
    fit = bundle.stages["fit"]["detail"]
    target = 1.0 / (dw - 1.0)
    print(f"{kw}: stretched exponent {fit['stretched_exponent']:.4f} (target {target:.4f}), "
          f"R^2 {fit['r_squared']:.4f}")
    assert abs(fit["stretched_exponent"] / target - 1.0) <= 0.25
    assert fit["r_squared"] >= 0.95


@criterion(9, "key-inequality negative part shrinks under refinement")
def test_key_refinement():
    neg = {}
    for side in SIDES:
        G, suite = key_suite(side)
        neg[side] = [key_negative_part(G, f, psi, p) for f, psi, p in suite]
    failures = []
    for coarse, fine in zip(SIDES, SIDES[1:]):
        for i, (a, b) in enumerate(zip(neg[coarse], neg[fine])):
            if b > 0.6 * a:
                failures.append((i, coarse, fine, a, b))
    print({s: [f"{v:.3g}" for v in vals] for s, vals in neg.items()})
    assert not failures, failures


@criterion(10, "byte-identical reports across thread counts")
def test_determinism(tmp_path):
    base = dict(level=4, seed=7)
    dirs = []
    for threads in (1, 8):
        out = tmp_path / f"threads{threads}"
        run_pipeline(ExperimentConfig(threads=threads, **base), out=str(out))
        dirs.append(out)
    names = sorted(p.name for p in dirs[0].iterdir() if p.suffix in (".csv", ".json"))
    assert "MANIFEST.json" in names and sum(n.endswith(".csv") for n in names) == 6
    for name in names:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
