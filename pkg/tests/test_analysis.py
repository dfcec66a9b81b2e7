import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spacetime_collapse.analysis import (
    SpacetimeHistogram,
    accumulate,
    average,
    born_statistics,
    conditional_density,
    conditional_moments,
    density_operator_histogram,
    drift_regression,
    empty_histogram,
    fit_decay_rate,
    fit_world_line,
    martingale_report,
    merge,
    time_marginal,
)
from spacetime_collapse.dynamics import Outcome, TrajectoryRecord
from spacetime_collapse.errors import BasisMismatchError, EmptyTimeSliceError, GridError, InsufficientSamplesError
from spacetime_collapse.grid import make_grid, superposition_state
from spacetime_collapse.oracles import GaussianParams, conditional_variance, world_tube_density

SMALL = make_grid(4, 4, 1.0, 1.0)
TUBE = GaussianParams(sigma_x=1.0, sigma_t=1.0, p_bar=60.0, E_bar=200.0, mass=1000.0)
densities = arrays(np.float64, (4, 4), elements=st.floats(0.0, 10.0))


def _hist(density, samples=1):
    return SpacetimeHistogram((SMALL,), 2.0, (np.asarray(density, dtype=float),), samples)


def _tube_hist():
    grid = make_grid(64, 128, 0.5, 0.5)
    X, T = np.meshgrid(grid.x_axis, grid.t_axis, indexing="ij")
    density = world_tube_density(TUBE, 100.0, X, T).density
    return SpacetimeHistogram((grid,), 100.0, (density,), 200)


def _record(k, series, s=None, antithetic=False, extra=None):
    series = np.asarray(series, dtype=float)
    s = np.arange(series.size, dtype=float) if s is None else np.asarray(s, dtype=float)
    means = {"obs": series, **(extra or {})}
    return TrajectoryRecord(
        trajectory=k,
        seed=0,
        ds=1.0,
        s_values=s,
        means=means,
        variances={name: np.zeros(series.size) for name in means},
        norm_defects=np.zeros(series.size - 1),
        norm_residuals=np.zeros(series.size - 1),
        antithetic=antithetic,
    )


def _collapsed(index):
    return Outcome(True, index, float(index), float(index), 0.0)


def test_accumulating_a_whole_window_gives_unit_mass(packet):
    hist = empty_histogram(packet.grids, 2.0)
    for _ in range(20):
        hist = accumulate(hist, packet, 0.1)
    assert hist.samples == 20
    assert hist.mass() == pytest.approx(1.0)
    np.testing.assert_allclose(hist.densities[0], packet.density())


def test_accumulate_marginalises_other_particles():
    psi = superposition_state((SMALL, SMALL), [[(0.0, 0.0), (1.0, 1.0)], [(-1.0, 0.0), (1.0, -1.0)]], [1.0, 1.0])
    hist = accumulate(empty_histogram(psi.grids, 1.0), psi, 1.0)
    assert hist.mass(0) == pytest.approx(1.0)
    assert hist.mass(1) == pytest.approx(1.0)
    assert hist.densities[0][SMALL.index_of(0.0, 0), SMALL.index_of(0.0, 1)] == pytest.approx(0.5)
    assert hist.densities[1][SMALL.index_of(1.0, 0), SMALL.index_of(-1.0, 1)] == pytest.approx(0.5)


def test_accumulate_checks_basis_and_lattice(packet):
    with pytest.raises(BasisMismatchError):
        accumulate(empty_histogram(packet.grids, 1.0), packet.to_momentum_energy(), 0.1)
    with pytest.raises(GridError):
        accumulate(empty_histogram((SMALL,), 1.0), packet, 0.1)
    with pytest.raises(GridError):
        empty_histogram((SMALL,), 0.0)


@settings(deadline=None)
@given(densities, densities, densities)
def test_merge_does_not_depend_on_order(a, b, c):
    ha, hb, hc = _hist(a), _hist(b), _hist(c)
    np.testing.assert_array_equal(merge(ha, hb).densities[0], merge(hb, ha).densities[0])
    left = merge(merge(ha, hb), hc)
    right = merge(ha, merge(hb, hc))
    np.testing.assert_allclose(left.densities[0], right.densities[0], rtol=1e-12, atol=1e-12)
    assert left.samples == right.samples == 3


def test_merge_rejects_different_windows():
    with pytest.raises(GridError):
        merge(_hist(np.zeros((4, 4))), SpacetimeHistogram((SMALL,), 3.0, (np.zeros((4, 4)),)))


def test_average_is_the_ensemble_mean():
    avg = average([_hist(np.full((4, 4), 1.0)), _hist(np.full((4, 4), 3.0))])
    np.testing.assert_allclose(avg.densities[0], 2.0)
    assert avg.samples == 2
    with pytest.raises(InsufficientSamplesError):
        average([])


def test_histogram_rows():
    density = np.arange(16.0).reshape(4, 4)
    rows = _hist(density).to_rows()
    assert len(rows) == 16
    assert rows[0] == (-2.0, -2.0, 0.0)
    assert rows[5] == (-1.0, -1.0, 5.0)


def test_world_tube_marginal_and_conditional_density():
    hist = _tube_hist()
    grid = hist.grids[0]
    tm = time_marginal(hist)
    np.testing.assert_allclose(tm, 1000.0 / (100.0 * 200.0), rtol=1e-8)
    cond = conditional_density(hist, 2.0)
    assert cond.sum() * grid.dx == pytest.approx(1.0)
    assert grid.x_axis[np.argmax(cond)] == pytest.approx(0.5, abs=grid.dx)


def test_conditional_moments_and_world_line_fit():
    hist = _tube_hist()
    cm = conditional_moments(hist, t_window=(-6.0, 6.0))
    assert cm.t.min() >= -6.0 and cm.t.max() <= 6.0
    np.testing.assert_allclose(cm.mean, 0.3 * cm.t, atol=1e-8)
    np.testing.assert_allclose(cm.variance, conditional_variance(TUBE), rtol=1e-6)
    fit = fit_world_line(hist, t_window=(-6.0, 6.0))
    assert fit.slope == pytest.approx(0.3, rel=1e-8)
    assert fit.intercept == pytest.approx(0.0, abs=1e-8)
    assert fit.points == cm.t.size


def test_empty_time_slices_are_reported():
    density = np.zeros((4, 4))
    density[:, 1] = 1.0
    hist = _hist(density)
    with pytest.raises(EmptyTimeSliceError):
        conditional_density(hist, 0.0)
    assert conditional_density(hist, -1.0).sum() == pytest.approx(1.0)
    with pytest.raises(EmptyTimeSliceError):
        conditional_moments(_hist(np.zeros((4, 4))))
    with pytest.raises(InsufficientSamplesError):
        fit_world_line(hist)


def test_operator_form_matches_accumulation():
    states = [
        superposition_state((SMALL,), [[(0.0, 0.0)], [(1.0, -1.0)]], [1.0, 1.0]),
        superposition_state((SMALL,), [[(0.0, 0.0)]], [1.0]),
        superposition_state((SMALL,), [[(-1.0, 1.0)], [(1.0, -1.0)]], [1.0, 2.0j]),
    ]
    rho, from_operator = density_operator_histogram(states, 1.0, 3.0)
    hist = empty_histogram((SMALL,), 3.0)
    for psi in states:
        hist = accumulate(hist, psi, 1.0)
    np.testing.assert_allclose(from_operator.densities[0], hist.densities[0], atol=1e-14)
    assert np.trace(rho.elements).real == pytest.approx(1.0)
    with pytest.raises(InsufficientSamplesError):
        density_operator_histogram([], 1.0, 3.0)


def test_decay_fit_recovers_the_strength():
    s = np.linspace(0.0, 5.0, 20)
    mags = 0.5 * np.exp(-0.5 * 0.8 * 2.0 ** 2 * s)
    fit = fit_decay_rate(s, mags, 2.0)
    assert fit.strength == pytest.approx(0.8)
    assert fit.intercept == pytest.approx(math.log(0.5))
    assert fit.points == 20


def test_decay_fit_input_checks():
    s = np.linspace(0.0, 1.0, 12)
    with pytest.raises(InsufficientSamplesError):
        fit_decay_rate(s[:9], np.ones(9), 1.0)
    with pytest.raises(ValueError):
        fit_decay_rate(s, np.zeros(12), 1.0)
    with pytest.raises(ValueError):
        fit_decay_rate(s, np.ones(12), 0.0)
    with pytest.raises(ValueError):
        fit_decay_rate(s, np.ones(11), 1.0)


def test_born_statistics_counts_and_excludes():
    outcomes = [_collapsed(0)] * 60 + [_collapsed(1)] * 40 + [None] * 3 + [Outcome(False, 0, 0.0, 0.5, 0.25)] * 2
    report = born_statistics(outcomes, [3.0, 2.0])
    assert report.probabilities == pytest.approx([0.6, 0.4])
    assert report.counts == [60, 40]
    assert report.frequencies == pytest.approx([0.6, 0.4])
    assert report.chi2 == pytest.approx(0.0)
    assert report.p_value == pytest.approx(1.0)
    assert report.collapsed == 100
    assert report.excluded == 5
    assert report.to_dict()["pass"] is True


def test_born_statistics_flags_impossible_outcomes():
    report = born_statistics([_collapsed(0), _collapsed(1)], [1.0, 0.0])
    assert math.isinf(report.chi2)
    assert not report.passed
    with pytest.raises(InsufficientSamplesError):
        born_statistics([None, None], [0.5, 0.5])


def test_martingale_report_passes_for_driftless_ensembles():
    records = [_record(k, [0.0, 0.5 * (-1) ** k, (-1) ** k]) for k in range(100)]
    report = martingale_report(records, "obs")
    assert report.mean_drift == pytest.approx(0.0)
    assert report.passed
    assert report.trajectories == 100


def test_martingale_report_detects_drift_and_uses_predictions():
    rng = np.random.default_rng(3)
    records = [_record(k, [0.0, 1.0 + 0.01 * rng.normal()]) for k in range(100)]
    assert not martingale_report(records, "obs").passed
    assert martingale_report(records, "obs", predicted=1.0, atol=0.01).passed
    report = martingale_report(records, "obs", predicted=lambda r: r.series("obs")[-1])
    assert report.passed
    with pytest.raises(InsufficientSamplesError):
        martingale_report(records[:10], "obs")


def test_martingale_report_pairs_antithetic_partners():
    records = [_record(k, [0.0, 0.3 * (k // 2 + 1) * (-1) ** k], antithetic=True) for k in range(100)]
    report = martingale_report(records, "obs")
    assert report.stderr == pytest.approx(0.0, abs=1e-15)
    assert report.passed


def test_drift_regression_recovers_coefficients():
    records = []
    rng = np.random.default_rng(0)
    for k in range(5):
        x = rng.normal(size=6)
        y = np.concatenate([[0.0], np.cumsum(3.0 * x[:-1] * 0.5)])
        records.append(_record(k, y, s=0.5 * np.arange(6), extra={"x": x}))
    fit = drift_regression(records, "obs", ["x"])
    assert fit.coefficients["x"] == pytest.approx(3.0)
    assert fit.stderr["x"] == pytest.approx(0.0, abs=1e-9)
    assert fit.points == 25
    with pytest.raises(InsufficientSamplesError):
        drift_regression(records[:1], "obs", ["x", "x", "x", "x", "x"])
