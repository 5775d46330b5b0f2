import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gasket_spectral
from davieslab.builders import sierpinski_point
from davieslab.cutoff import AnnulusSpec, harmonic_cutoff
from davieslab.errors import AmplitudeError, DomainError
from davieslab.graph import dirichlet_energy, edge_energy
from davieslab.heat import kernel_matrix
from davieslab.perturb import (PerturbationSpec, cauchy_schwarz_gap, edgewise_convexity_gap,
                               key_inequality_margin, key_margin_density, key_negative_part,
                               offdiag_bound_assemble, one_to_inf_norm, perturb_apply,
                               perturb_derivative, perturbed_kernel, write_margin_csv)

S3 = gasket_spectral(3)
N3 = S3.graph.n


@pytest.fixture(scope="module")
def S4():
    return gasket_spectral(4)


def test_zero_psi_is_heat_semigroup(S4, rng):
    f = rng.standard_normal(S4.graph.n)
    np.testing.assert_allclose(perturb_apply(S4, np.zeros(S4.graph.n), 1.3, f), S4.evolve(f, 1.3),
                               atol=1e-14)
    np.testing.assert_allclose(perturbed_kernel(S4, np.zeros(S4.graph.n), 1.3), kernel_matrix(S4, 1.3),
                               atol=1e-14)


def test_constant_psi_is_heat_semigroup(S4, rng):
    f = rng.standard_normal(S4.graph.n)
    np.testing.assert_allclose(perturb_apply(S4, np.full(S4.graph.n, 4.2), 0.8, f), S4.evolve(f, 0.8),
                               atol=1e-13)


def test_perturbed_semigroup_law(S4, rng):
    G = S4.graph
    psi = rng.uniform(0, 3, G.n)
    f = rng.standard_normal(G.n)
    once = perturb_apply(S4, psi, 1.0, f)
    twice = perturb_apply(S4, psi, 0.6, perturb_apply(S4, psi, 0.4, f))
    assert np.max(np.abs(once - twice)) <= 1e-8 * max(1.0, np.max(np.abs(once)))


def test_kernel_matches_operator(S4, rng):
    G = S4.graph
    psi = rng.uniform(0, 5, G.n)
    K = perturbed_kernel(S4, psi, 2.0)
    cols = np.column_stack([perturb_apply(S4, psi, 2.0, np.eye(G.n)[y] / G.mu[y]) for y in range(G.n)])
    assert np.max(np.abs(K - cols)) <= 1e-10 * np.max(np.abs(K))


def test_rows_not_conserved_for_nonconstant_psi(S4, rng):
    psi = rng.uniform(0, 2, S4.graph.n)
    K = perturbed_kernel(S4, psi, 1.0)
    assert np.max(np.abs(K @ S4.mu - 1.0)) > 1e-3


def test_derivative_matches_finite_difference(S4, rng):
    G = S4.graph
    psi = rng.uniform(0, 2, G.n)
    f = rng.standard_normal(G.n)
    h = 1e-5
    fd = (perturb_apply(S4, psi, 1.0 + h, f) - perturb_apply(S4, psi, 1.0 - h, f)) / (2 * h)
    np.testing.assert_allclose(perturb_derivative(S4, psi, 1.0, f), fd, atol=1e-6)


def test_amplitude_cap():
    with pytest.raises(AmplitudeError):
        PerturbationSpec(np.r_[0.0, 250.0])


def test_nonfinite_psi():
    with pytest.raises(DomainError):
        PerturbationSpec(np.r_[0.0, np.inf])


def test_from_cutoff_range():
    G = S3.graph
    A = AnnulusSpec(sierpinski_point(G, 0.5, 0.0), 1.0, 2.0).validate(G)
    spec = PerturbationSpec.from_cutoff(harmonic_cutoff(G, A), 3.0)
    assert spec.psi.min() == 0.0 and spec.psi.max() == 3.0
    assert spec.amplitude == 3.0


def test_nonpositive_time(S4):
    with pytest.raises(DomainError):
        perturbed_kernel(S4, np.zeros(S4.graph.n), 0.0)


psis = arrays(np.float64, N3, elements=st.floats(-4, 4, allow_nan=False))


@settings(max_examples=25, deadline=None)
@given(psis, st.floats(-50, 50), st.floats(0.05, 20))
def test_gauge_invariance(psi, c, t):
    a = perturbed_kernel(S3, psi, t)
    b = perturbed_kernel(S3, psi + c, t)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


@settings(max_examples=25, deadline=None)
@given(psis, st.floats(0.05, 20))
def test_adjoint_is_transpose(psi, t):
    a = perturbed_kernel(S3, psi, t)
    b = perturbed_kernel(S3, -psi, t)
    assert np.max(np.abs(a - b.T)) <= 1e-10 * np.max(np.abs(a))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(1, 8))
def test_edgewise_convexity_gap_nonnegative(a, b, p):
    gap = edgewise_convexity_gap(a, b, p)
    scale = max(1.0, a, b) ** (2 * p)
    assert gap >= -1e-12 * scale


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, N3, elements=st.floats(0, 3, allow_nan=False)), psis,
       st.floats(1, 4))
def test_cauchy_schwarz_aggregated(f, psi, p):
    gap = cauchy_schwarz_gap(S3.graph, f, psi, p)
    scale = 1 + float(np.max(f)) ** (2 * p) * (1 + float(np.ptp(psi))) ** 2 * 100
    assert gap >= -1e-10 * scale


def test_key_margin_identity_case(rng):
    G = S3.graph
    f = rng.uniform(0.1, 2, G.n)
    assert key_inequality_margin(G, f, np.zeros(G.n), 1.0) == pytest.approx(0.0, abs=1e-13)


def test_key_margin_constant_psi_is_edgewise_convexity(rng):
    G = S3.graph
    f = rng.uniform(0.0, 2, G.n)
    p = 2.5
    margin = key_inequality_margin(G, f, np.full(G.n, 1.7), p)
    edges = np.sum(G.cond * edgewise_convexity_gap(f[G.edge_u], f[G.edge_v], p))
    assert margin == pytest.approx(edges, rel=1e-12)
    assert margin >= 0


def test_key_density_sums_to_margin(rng):
    G = S3.graph
    f = rng.uniform(0.1, 2, G.n)
    psi = rng.uniform(0, 1, G.n)
    assert key_margin_density(G, f, psi, 2.0).sum() == pytest.approx(
        key_inequality_margin(G, f, psi, 2.0), rel=1e-10)
    assert key_negative_part(G, f, psi, 2.0) >= 0


def test_key_margin_negative_f():
    G = S3.graph
    f = np.ones(G.n)
    f[0] = -1
    with pytest.raises(DomainError):
        key_inequality_margin(G, f, np.zeros(G.n), 2.0)


def test_offdiag_zero_psi():
    assert offdiag_bound_assemble(2.5, np.zeros(4), 0, 3) == 2.5


def _cutoff_psi(G, x, r, lam):
    A = AnnulusSpec(x, float(r), float(r)).validate(G)
    return PerturbationSpec.from_cutoff(harmonic_cutoff(G, A), lam)


def test_offdiag_far_factor():
    S = gasket_spectral(5)
    G = S.graph
    x = sierpinski_point(G, 0.5, 0.0)
    spec = _cutoff_psi(G, x, 4, 3.0)
    y = int(np.flatnonzero(G.distances_from(x) > 8)[0])
    assert offdiag_bound_assemble(1.0, spec, x, y) == pytest.approx(math.exp(-3.0), rel=1e-15)


def test_offdiag_domination_gasket5():
    S = gasket_spectral(5)
    G = S.graph
    x = sierpinski_point(G, 0.5, 0.0)
    d = G.distances_from(x)
    ys = np.flatnonzero(d > 16)[::7]
    bad = 0
    for lam in (1.0, 2.0, 4.0):
        spec = _cutoff_psi(G, x, 8, lam)
        for t in (2.0, 8.0, 32.0, 128.0):
            P = kernel_matrix(S, t)
            m = one_to_inf_norm(S, spec, t)
            bad += sum(P[x, y] > offdiag_bound_assemble(m, spec, x, int(y)) * (1 + 1e-12) for y in ys)
    assert bad == 0


def test_margin_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_margin_csv([(2, 1, 0.5, -1e-3, 1e-3)], path)
    assert path.read_text().splitlines() == ["p,lambda,t,margin,negative_part", "2.0,1.0,0.5,-0.001,0.001"]


def test_energy_helper_consistency(rng):
    G = S3.graph
    f = rng.standard_normal(G.n)
    assert np.sum(edge_energy(G, f)) == pytest.approx(dirichlet_energy(G, f), rel=1e-14)
