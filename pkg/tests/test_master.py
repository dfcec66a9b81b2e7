import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spacetime_collapse.errors import (
    BasisMismatchError,
    DegenerateConfigurationError,
    InsufficientSamplesError,
    NonCommutingGeneratorsError,
    OperatorError,
)
from spacetime_collapse.grid import Basis, BasisState, DensityMatrix, make_grid, superposition_state
from spacetime_collapse.master import (
    MAX_RATE_STEP,
    ExplicitOperator,
    decay_solution,
    ensemble_density,
    evolve_master,
    example_collapse,
    example_no_collapse,
    master_step,
    max_rate,
    stable_steps,
)
from spacetime_collapse.operators import energy, interval_operator, position

LABELS = tuple(BasisState(Basis.POSITION_TIME, ((float(a), 0.0),)) for a in range(3))
PAULI_X = np.array([[0, 1], [1, 0]])
PAULI_Z = np.array([[1, 0], [0, -1]])
TWO_PARTICLE_LABELS = (
    BasisState(Basis.POSITION_TIME, ((0.0, 0.0), (1.0, 0.0))),
    BasisState(Basis.POSITION_TIME, ((3.0, 0.0), (1.0, 0.0))),
)


def _two_level(vector=(1.0, 1.0)):
    return DensityMatrix.pure(list(vector), LABELS[:2])


def test_diagonal_generator_decays_coherence_at_the_closed_form_rate():
    rho = decay_solution(_two_level(), [position(0, 0.5)], 4.0)
    assert rho.element(0, 1) == pytest.approx(0.5 * math.exp(-0.25 * 4.0))
    assert rho.diagonal() == pytest.approx([0.5, 0.5])


def test_runge_kutta_matches_the_closed_form():
    rho0 = DensityMatrix.pure([1.0, 2.0, 1j], LABELS)
    gen = [position(0, 0.7)]
    evolution = evolve_master(rho0, None, gen, 0.01, 200, track=[(0, 2), (1, 2)], check_positivity=True)
    exact = decay_solution(rho0, gen, 2.0)
    np.testing.assert_allclose(evolution.final.elements, exact.elements, atol=1e-9)
    assert evolution.s_values[-1] == pytest.approx(2.0)
    assert evolution.elements[(0, 2)].shape == (201,)
    assert evolution.elements[(0, 2)][0] == pytest.approx(rho0.element(0, 2))
    assert np.min(evolution.min_eigenvalues) > -1e-10


def test_zero_step_returns_the_input():
    rho = _two_level()
    assert master_step(rho, None, [position(0, 1.0)], 0.0) is rho
    assert decay_solution(rho, [position(0, 1.0)], 0.0) is rho


def test_generator_basis_must_match_the_density_matrix():
    with pytest.raises(BasisMismatchError):
        master_step(_two_level(), None, [energy(0)], 0.1)
    with pytest.raises(BasisMismatchError):
        master_step(_two_level(), None, [ExplicitOperator(np.eye(3), 1.0)], 0.1)


def test_explicit_operator_must_be_hermitian_and_square():
    with pytest.raises(OperatorError):
        ExplicitOperator(np.array([[0, 1], [0, 0]]))
    with pytest.raises(OperatorError):
        ExplicitOperator(np.ones((2, 3)))


def test_decay_solution_rejects_non_commuting_generators():
    gens = [ExplicitOperator(PAULI_X, 1.0), ExplicitOperator(PAULI_Z, 1.0)]
    with pytest.raises(NonCommutingGeneratorsError):
        decay_solution(_two_level(), gens, 1.0)


def test_dense_commuting_generators_match_the_master_equation():
    rotation = np.array([[1, 1], [1, -1]]) / math.sqrt(2)
    a = ExplicitOperator(rotation @ np.diag([0.0, 2.0]) @ rotation.T, 0.3)
    b = ExplicitOperator(rotation @ np.diag([1.0, -1.0]) @ rotation.T, 0.2)
    H = ExplicitOperator(rotation @ np.diag([0.5, 0.0]) @ rotation.T)
    rho0 = _two_level((1.0, 0.2j))
    exact = decay_solution(rho0, [a, b], 1.5, H)
    evolved = evolve_master(rho0, H, [a, b], 0.005, 300).final
    np.testing.assert_allclose(evolved.elements, exact.elements, atol=1e-9)


@settings(deadline=None, max_examples=40)
@given(
    arrays(np.float64, (2, 2), elements=st.floats(-1, 1)),
    arrays(np.float64, (2, 2), elements=st.floats(-1, 1)),
    st.floats(0.0, 1.0),
    st.floats(1e-3, 0.02),
)
def test_master_step_keeps_the_density_matrix_hermitian_with_unit_trace(re, im, strength, ds):
    m = re + 1j * im
    generator = ExplicitOperator(0.5 * (m + m.conj().T), strength)
    rho0 = _two_level((1.0, 0.5 - 0.3j))
    rho = master_step(rho0, None, [generator], ds)
    np.testing.assert_allclose(rho.elements, rho.elements.conj().T, atol=1e-14)
    assert np.trace(rho.elements).real == pytest.approx(1.0, abs=1e-12)


def test_trace_is_conserved_by_the_integrator_alone():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    generator = ExplicitOperator(0.5 * (m + m.conj().T), 0.4)
    H = ExplicitOperator(np.diag([0.0, 0.7, -0.4]))
    rho0 = DensityMatrix.pure([1.0, 2.0, 1j], LABELS)
    final = evolve_master(rho0, H, [generator], 0.01, 2000).final
    assert np.trace(final.elements).real == pytest.approx(1.0, abs=1e-11)


def test_off_diagonal_magnitudes_never_grow_without_a_hamiltonian():
    rho0 = DensityMatrix.pure([1.0, 2.0, 1j], LABELS)
    gens = [position(0, 0.7), ExplicitOperator(np.diag([0.0, 2.0, -1.0]), 0.3)]
    pairs = [(0, 1), (0, 2), (1, 2)]
    evolution = evolve_master(rho0, None, gens, 0.02, 300, track=pairs)
    for pair in pairs:
        magnitudes = np.abs(evolution.elements[pair])
        assert np.all(np.diff(magnitudes) <= 1e-15)
        assert magnitudes[-1] < magnitudes[0]
    np.testing.assert_allclose(evolution.final.diagonal(), rho0.diagonal(), atol=1e-14)


def test_max_rate_sets_the_stable_step_count():
    rho0 = DensityMatrix.pure([1.0, 1.0], TWO_PARTICLE_LABELS)
    rate = max_rate(rho0, None, [interval_operator(0, 1, 1.0)])
    assert rate == pytest.approx(4.5)
    assert stable_steps(rate, 700.0, 1000) == 3150
    assert rate * 700.0 / 3150 <= MAX_RATE_STEP
    assert stable_steps(rate, 1.0, 1000) == 1000
    assert stable_steps(rate, 0.0, 1000) == 0


def test_max_rate_spans_only_populated_states_for_diagonal_dynamics():
    rho0 = DensityMatrix.pure([1.0, 1.0, 0.0], LABELS)
    assert max_rate(rho0, None, [position(0, 2.0)]) == pytest.approx(1.0)
    hopping = ExplicitOperator(np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0]]), 1.0)
    assert max_rate(rho0, None, [hopping]) == pytest.approx(2.0)


def test_ensemble_density_of_identical_states_is_pure():
    grid = make_grid(4, 4, 1.0, 1.0)
    psi = superposition_state((grid,), [[(0.0, 0.0)], [(1.0, 0.0)]], [1.0, 1.0])
    result = ensemble_density([psi] * 5)
    np.testing.assert_allclose(result.density.elements, DensityMatrix.from_state(psi).elements, atol=1e-14)
    assert result.samples == 5
    np.testing.assert_allclose(result.stderr, 0.0, atol=1e-8)
    with pytest.raises(InsufficientSamplesError):
        ensemble_density([psi])


def test_ensemble_density_mixes_branches():
    grid = make_grid(4, 4, 1.0, 1.0)
    left = superposition_state((grid,), [[(0.0, 0.0)]], [1.0])
    right = superposition_state((grid,), [[(1.0, 0.0)]], [1.0])
    result = ensemble_density([left, right])
    i, j = grid.index_of(0.0, 0) * 4 + grid.index_of(0.0, 1), grid.index_of(1.0, 0) * 4 + grid.index_of(0.0, 1)
    assert result.density.element(i, i) == pytest.approx(0.5)
    assert result.density.element(i, j) == 0.0


def test_no_collapse_example_keeps_the_superposition():
    report = example_no_collapse()
    assert abs(report.off_diagonal) == pytest.approx(0.5, abs=1e-12)
    assert report.eigenvalues == [0.0, 0.0]
    assert report.diagonal == pytest.approx([0.5, 0.5])
    assert report.iterated_deviation < 1e-12
    assert report.to_dict()["off_diagonal_magnitude"] == pytest.approx(0.5)


def test_collapse_example_suppresses_coherence():
    report = example_collapse(0.0, 1.0, 3.0, 1.0, 1.0)
    assert report.eigenvalues == [1.0, 4.0]
    assert report.expected_factor == pytest.approx(math.exp(-4.5))
    assert abs(report.off_diagonal) == pytest.approx(0.5 * math.exp(-4.5), rel=1e-12)
    assert report.iterated_deviation < 1e-6
    assert abs(example_collapse(0.0, 1.0, 3.0, 25.0 / 9.0, 1.0).off_diagonal) < 1e-5


def test_collapse_example_stays_stable_at_large_strength():
    report = example_collapse(0.0, 1.0, 3.0, 700.0, 1.0)
    assert abs(report.off_diagonal) < 1e-12
    assert report.diagonal == pytest.approx([0.5, 0.5])
    assert report.iterated_deviation < 1e-9


def test_collapse_example_reports_only_the_closed_form_past_the_step_cap():
    report = example_collapse(0.0, 1.0, 3.0, 1e6, 1.0)
    assert report.iterated_deviation is None
    assert report.to_dict()["off_diagonal_magnitude"] == 0.0


def test_collapse_example_rejects_equal_separations():
    with pytest.raises(DegenerateConfigurationError):
        example_collapse(0.0, 1.0, 2.0, 1.0, 1.0)
    with pytest.raises(OperatorError):
        example_collapse(0.0, 1.0, 3.0, -1.0, 1.0)
