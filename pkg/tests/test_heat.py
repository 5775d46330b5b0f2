import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import (DF_GASKET, DW_GASKET, gasket_spectral, lattice, path_graph,
                      two_vertex)
from davieslab.errors import ConfigurationError, DomainError, InsufficientDataError
from davieslab.heat import (contraction_ratios, diagonal_sup, heat_kernel, kernel_matrix,
                            nash_constant_estimate, nash_family, nash_ratio, ondiagonal_profile,
                            orthonormality_residual, reconstruction_residual, semigroup_residual,
                            spectral_decompose, time_window, write_kernel_csv)
from davieslab.builders import build_lattice


@pytest.fixture(scope="module")
def S4():
    return gasket_spectral(4)


def test_two_vertex_eigenvalues():
    S = spectral_decompose(two_vertex())
    np.testing.assert_allclose(S.eigenvalues, [0.0, 2.0], atol=1e-14)


def test_two_vertex_kernel_hand_value():
    S = spectral_decompose(two_vertex())
    assert heat_kernel(S, 1.0).values[0, 1] == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-14)


def test_constant_is_ground_state(S4):
    phi0 = S4.eigenfunctions[:, 0]
    assert S4.eigenvalues[0] == pytest.approx(0.0, abs=1e-12)
    assert np.ptp(phi0) <= 1e-12


def test_spectral_cap():
    with pytest.raises(ConfigurationError):
        spectral_decompose(build_lattice(2, 64))


def test_spectral_residuals(S4):
    assert orthonormality_residual(S4) <= 1e-10
    assert reconstruction_residual(S4) <= 1e-10
    assert S4.eigenvalues.min() >= -1e-10


def test_kernel_needs_positive_time(S4):
    with pytest.raises(DomainError):
        heat_kernel(S4, 0.0)


def test_long_time_limit(S4):
    P = heat_kernel(S4, 1e5).values
    np.testing.assert_allclose(P, 1.0 / S4.graph.total_mass, rtol=1e-9)


def test_semigroup_on_gasket(S4):
    assert semigroup_residual(S4, 0.3, 0.7) <= 1e-8


def test_kernel_symmetric_and_conservative(S4):
    P = kernel_matrix(S4, 2.5)
    assert np.max(np.abs(P - P.T)) <= 1e-12
    assert np.max(np.abs(P @ S4.mu - 1.0)) <= 1e-10
    assert P.min() >= -1e-12


def test_evolve_matches_kernel(S4, rng):
    f = rng.standard_normal(S4.graph.n)
    P = heat_kernel(S4, 1.7)
    np.testing.assert_allclose(S4.evolve(f, 1.7), P.apply(f, S4.mu), atol=1e-12)


def test_time_derivative_matches_generator(S4, rng):
    from davieslab.graph import laplacian_apply

    f = rng.standard_normal(S4.graph.n)
    g = S4.evolve(f, 0.9)
    np.testing.assert_allclose(S4.time_derivative(f, 0.9), -laplacian_apply(S4.graph, g), atol=1e-10)


def test_evolve_vectorised_over_time(S4, rng):
    f = rng.standard_normal(S4.graph.n)
    ts = np.array([0.5, 1.0, 4.0])
    G = S4.evolve(f, ts)
    for j, t in enumerate(ts):
        np.testing.assert_allclose(G[:, j], S4.evolve(f, t), atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 42, elements=st.floats(-5, 5, allow_nan=False)),
       st.floats(0.01, 50.0))
def test_contraction_property(f, t):
    S = gasket_spectral(3)
    if not np.any(f):
        return
    ratios = contraction_ratios(S, f, t)
    for p, v in ratios.items():
        assert v <= 1.0 + 1e-10, p


def test_time_window():
    assert time_window(path_graph(5), 2.0) == (1.0, 16.0)


def test_ondiagonal_empty_grid(S4):
    with pytest.raises(InsufficientDataError):
        ondiagonal_profile(S4, [], DF_GASKET, DW_GASKET)


def test_ondiagonal_outside_window(S4):
    with pytest.raises(DomainError):
        ondiagonal_profile(S4, [1.0, 1e9], DF_GASKET, DW_GASKET)


def test_ondiagonal_flat_on_gasket():
    S = gasket_spectral(6)
    tmax = time_window(S.graph, DW_GASKET)[1]
    prof = ondiagonal_profile(S, np.geomspace(1, tmax / 10, 15), DF_GASKET, DW_GASKET)
    assert prof.c_high / prof.c_low <= 4.0


def test_ondiagonal_flat_on_lattice():
    S = spectral_decompose(lattice(2, 48))
    prof = ondiagonal_profile(S, np.geomspace(4, 256, 10), 2.0, 2.0)
    assert prof.c_high / prof.c_low <= 4.0
    assert diagonal_sup(S, 4.0) * 4.0 == pytest.approx(prof.samples[0][1])


def test_nash_bump_positive(S4):
    G = S4.graph
    bump = np.clip(1 - G.distances_from(0) / 4, 0, None)
    est = nash_constant_estimate(G, DF_GASKET, DW_GASKET, [bump])
    assert 0 < est.constant < math.inf


def test_nash_constant_excluded(S4):
    G = S4.graph
    bump = np.clip(1 - G.distances_from(0) / 4, 0, None)
    with pytest.warns(UserWarning):
        est = nash_constant_estimate(G, DF_GASKET, DW_GASKET, [np.ones(G.n), bump])
    assert est.excluded == 1


def test_nash_ratio_scale_invariant(S4, rng):
    f = np.abs(rng.standard_normal(S4.graph.n))
    a = nash_ratio(S4.graph, f, DF_GASKET, DW_GASKET)
    b = nash_ratio(S4.graph, 7.5 * f, DF_GASKET, DW_GASKET)
    assert a == pytest.approx(b, rel=1e-12)


def test_nash_stable_across_levels():
    vals = []
    for level in (4, 5, 6):
        S = gasket_spectral(level)
        vals.append(nash_constant_estimate(S.graph, DF_GASKET, DW_GASKET,
                                           nash_family(S, dw=DW_GASKET)).constant)
    assert max(vals) / min(vals) <= 2.0


def test_kernel_csv_columns(tmp_path, S4):
    path = tmp_path / "k.csv"
    write_kernel_csv(S4, [1.0, 0.5], path, vertices=[0, 1])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y,p"
    assert len(lines) == 1 + 2 * 4
    assert lines[1].startswith("0.5,0,0,")
