import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spacetime_collapse.errors import BasisMismatchError, GridError, LatticeOverflowError
from spacetime_collapse.grid import (
    MAX_DENSITY_DIM,
    Basis,
    DensityMatrix,
    WaveFunction,
    check_support,
    delta_state,
    edge_probability,
    expectation,
    inner,
    lattice_basis,
    make_grid,
    superposition_state,
    variance,
)
from spacetime_collapse.operators import energy, momentum, position, time

GRID = make_grid(8, 8, 0.7, 0.9, 0.3, -0.2, 0.1, 1.0)
parts = arrays(np.float64, (8, 8), elements=st.floats(-1.0, 1.0))


def _state(re, im, grid=GRID):
    return WaveFunction((grid,), re + 1j * im, Basis.POSITION_TIME)


@pytest.mark.parametrize("n", [0, 2, 3, 6, 12])
def test_grid_rejects_sizes_that_are_not_powers_of_two(n):
    with pytest.raises(GridError):
        make_grid(n, 8, 1.0, 1.0)


def test_grid_rejects_nonpositive_spacing():
    with pytest.raises(GridError):
        make_grid(8, 8, 0.0, 1.0)


def test_dual_spacings_close_the_lattice():
    grid = make_grid(16, 32, 0.25, 0.5)
    assert grid.dx * grid.dp * grid.n_x == pytest.approx(2 * math.pi)
    assert grid.dt_lat * grid.dE * grid.n_t == pytest.approx(2 * math.pi)


def test_axes_are_centred_on_the_middle_index():
    assert GRID.x_axis[4] == pytest.approx(0.3)
    assert GRID.t_axis[4] == pytest.approx(-0.2)
    assert GRID.p_axis[4] == pytest.approx(0.1)
    assert GRID.E_axis[4] == pytest.approx(1.0)
    assert GRID.x_axis[5] - GRID.x_axis[4] == pytest.approx(0.7)


def test_index_of_rounds_and_rejects_points_off_the_lattice():
    assert GRID.index_of(0.3 + 0.7 * 2.1, 0) == 6
    assert GRID.index_of(1.0 + GRID.dE, 1, Basis.MOMENTUM_ENERGY) == 5
    with pytest.raises(GridError):
        GRID.index_of(100.0, 0)


def test_basis_dual():
    assert Basis.POSITION_TIME.dual is Basis.MOMENTUM_ENERGY
    assert Basis.MOMENTUM_ENERGY.dual is Basis.POSITION_TIME


def test_single_momentum_energy_mode_is_a_plane_wave():
    amplitudes = np.zeros((8, 8), dtype=complex)
    amplitudes[5, 2] = 1.0
    psi = WaveFunction((GRID,), amplitudes, Basis.MOMENTUM_ENERGY).to_position_time()
    p, E = GRID.p_axis[5], GRID.E_axis[2]
    x, t = np.meshgrid(GRID.x_axis, GRID.t_axis, indexing="ij")
    expected = GRID.dp * GRID.dE / (2 * math.pi) * np.exp(1j * (p * x - E * t))
    np.testing.assert_allclose(psi.amplitudes, expected, atol=1e-13)


@settings(deadline=None, max_examples=50)
@given(parts, parts)
def test_transform_preserves_the_norm(re, im):
    psi = _state(re, im)
    assume(psi.norm_squared() > 1e-6)
    assert psi.to_momentum_energy().norm_squared() == pytest.approx(psi.norm_squared(), rel=1e-10)


@settings(deadline=None, max_examples=30)
@given(parts, parts, parts, st.complex_numbers(max_magnitude=3.0))
def test_transform_is_linear(re1, re2, im, c):
    a, b = _state(re1, im), _state(re2, -im)
    combined = a.with_amplitudes(a.amplitudes + c * b.amplitudes).to_momentum_energy()
    separate = a.to_momentum_energy().amplitudes + c * b.to_momentum_energy().amplitudes
    np.testing.assert_allclose(combined.amplitudes, separate, atol=1e-10)


def test_transform_round_trip_returns_the_original():
    rng = np.random.default_rng(7)
    psi = _state(rng.normal(size=(8, 8)), rng.normal(size=(8, 8)))
    back = psi.to_momentum_energy().to_position_time()
    np.testing.assert_allclose(back.amplitudes, psi.amplitudes, atol=1e-12)


def test_transform_rejects_the_wrong_basis():
    psi = delta_state((GRID,), [(0.3, -0.2)])
    with pytest.raises(BasisMismatchError):
        psi.to_position_time()
    with pytest.raises(BasisMismatchError):
        psi.to_momentum_energy().to_momentum_energy()


def test_amplitudes_are_read_only():
    psi = delta_state((GRID,), [(0.3, -0.2)])
    with pytest.raises(ValueError):
        psi.amplitudes[0, 0] = 1.0


def test_amplitude_shape_must_match_the_lattice():
    with pytest.raises(GridError):
        WaveFunction((GRID,), np.zeros((8, 4)), Basis.POSITION_TIME)


def test_zero_state_cannot_be_normalised():
    with pytest.raises(GridError):
        WaveFunction((GRID,), np.zeros((8, 8)), Basis.POSITION_TIME).normalized()


def test_delta_state_is_an_eigenstate_of_position_and_time():
    x0, t0 = GRID.x_axis[2], GRID.t_axis[6]
    psi = delta_state((GRID,), [(x0, t0)])
    assert psi.norm_squared() == pytest.approx(1.0)
    assert expectation(psi, position(0)) == pytest.approx(x0)
    assert expectation(psi, time(0)) == pytest.approx(t0)
    assert variance(psi, position(0)) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_packet_has_the_configured_momentum_and_energy(packet):
    assert expectation(packet, momentum(0)) == pytest.approx(0.5, abs=1e-6)
    assert expectation(packet, energy(0)) == pytest.approx(1.5, abs=1e-6)
    assert variance(packet, energy(0)) == pytest.approx(0.25, rel=1e-6)


def test_inner_product_is_basis_independent(packet):
    other = delta_state(packet.grids, [(0.0, 0.0)])
    a = inner(other, packet)
    b = inner(other.to_momentum_energy(), packet)
    assert a == pytest.approx(b, abs=1e-12)
    assert inner(packet, packet) == pytest.approx(1.0)


def test_inner_product_requires_the_same_lattice(packet):
    other = delta_state((make_grid(32, 32, 0.25, 0.5),), [(0.0, 0.0)])
    with pytest.raises(GridError):
        inner(packet, other)


def test_superposition_state_is_normalised_with_branch_weights():
    psi = superposition_state((GRID,), [[(0.3, -0.2)], [(1.0, -0.2)]], [3.0, 4.0])
    cell = psi.cell_volume
    assert psi.norm_squared() == pytest.approx(1.0)
    assert psi.density()[4, 4] * cell == pytest.approx(0.36)
    assert psi.density()[5, 4] * cell == pytest.approx(0.64)


def test_superposition_state_checks_branch_shapes():
    with pytest.raises(GridError):
        superposition_state((GRID,), [[(0.3, -0.2)]], [1.0, 1.0])
    with pytest.raises(GridError):
        superposition_state((GRID,), [[(0.3, -0.2), (0.3, -0.2)]], [1.0])


def test_edge_probability_and_support_monitor(caplog):
    inside = delta_state((GRID,), [(GRID.x_axis[4], GRID.t_axis[4])])
    at_edge = delta_state((GRID,), [(GRID.x_axis[0], GRID.t_axis[4])])
    assert edge_probability(inside) == 0.0
    assert edge_probability(at_edge) == pytest.approx(1.0)
    assert check_support(inside) == 0.0
    with pytest.raises(LatticeOverflowError) as info:
        check_support(at_edge)
    assert info.value.edge_probability == pytest.approx(1.0)
    assert check_support(at_edge, strict=False) == pytest.approx(1.0)
    assert "Wrap-around monitor" in caplog.text


def test_density_matrix_from_state_has_unit_trace(packet_grid):
    grid = make_grid(8, 8, 1.0, 1.0)
    psi = superposition_state((grid,), [[(0.0, 0.0)], [(1.0, 1.0)]], [1.0, 1j])
    rho = DensityMatrix.from_state(psi)
    assert rho.dim == 64
    assert rho.diagonal().sum() == pytest.approx(1.0)
    i, j = grid.index_of(0.0, 0) * 8 + grid.index_of(0.0, 1), grid.index_of(1.0, 0) * 8 + grid.index_of(1.0, 1)
    assert rho.element(i, j) == pytest.approx(-0.5j)
    assert rho.basis_labels[i].coordinates == ((0.0, 0.0),)
    assert rho.min_eigenvalue() > -1e-12


def test_density_matrix_validation():
    labels = lattice_basis((make_grid(4, 4, 1.0, 1.0),), Basis.POSITION_TIME)[:2]
    with pytest.raises(GridError, match="Hermitian"):
        DensityMatrix(labels, [[0.5, 0.1], [0.2, 0.5]])
    with pytest.raises(GridError, match="trace"):
        DensityMatrix(labels, [[0.5, 0.0], [0.0, 0.6]])
    with pytest.raises(GridError, match="positive"):
        DensityMatrix(labels, [[0.5, 0.9], [0.9, 0.5]])
    rho = DensityMatrix.pure([2.0, 0.0], labels)
    assert rho.element(0, 0) == pytest.approx(1.0)


def test_density_matrix_labels_must_share_a_basis():
    grid = make_grid(4, 4, 1.0, 1.0)
    labels = (lattice_basis((grid,), Basis.POSITION_TIME)[0], lattice_basis((grid,), Basis.MOMENTUM_ENERGY)[0])
    with pytest.raises(BasisMismatchError):
        DensityMatrix(labels, np.eye(2) / 2)


def test_lattice_basis_size_limit():
    assert len(lattice_basis((make_grid(64, 64, 1.0, 1.0),), Basis.POSITION_TIME)) == MAX_DENSITY_DIM
    with pytest.raises(GridError):
        lattice_basis((make_grid(64, 128, 1.0, 1.0),), Basis.POSITION_TIME)
