import numpy as np
import pytest

from spacetime_collapse.config import parse_config
from spacetime_collapse.ensemble import analysis_reports, predicted_free_drift, run_ensemble, run_single
from spacetime_collapse.errors import StepControlError


def _rows(ensemble):
    return [row for record in ensemble.records for row in record.to_rows()]


def test_results_do_not_depend_on_worker_count(two_level_text):
    config = parse_config(two_level_text(trajectories=3, S=2.0, ds=0.1, sample_every=4))
    serial = run_ensemble(config, workers=1)
    parallel = run_ensemble(config, workers=2)
    assert [r.index for r in parallel.results] == [0, 1, 2]
    assert _rows(serial) == _rows(parallel)


def test_trajectories_differ_by_index(two_level_text):
    config = parse_config(two_level_text(trajectories=2, S=2.0, ds=0.1))
    first, second = run_ensemble(config, workers=1).records
    assert not np.array_equal(first.series("x[0]"), second.series("x[0]"))


def test_born_report(two_level_text):
    config = parse_config(two_level_text(p1=0.36, trajectories=6, S=20.0, ds=0.1, analysis="born = true"))
    ensemble = run_ensemble(config, workers=1)
    born = analysis_reports(ensemble)["born"]

    assert born["probabilities"] == pytest.approx([0.36, 0.64])
    assert born["collapsed"] + born["excluded"] == 6
    assert sum(born["counts"]) == born["collapsed"]
    assert all(r.outcome is not None for r in ensemble.records)


def test_failed_trajectories_are_recorded(two_level_text):
    config = parse_config(two_level_text(trajectories=2, S=1.0, ds=0.1, strength=1e6))
    ensemble = run_ensemble(config, workers=1)
    assert ensemble.records == []
    assert [f["trajectory"] for f in ensemble.failures] == [0, 1]
    assert {f["error_type"] for f in ensemble.failures} == {"StepControlError"}
    assert analysis_reports(ensemble)["failures"] == ensemble.failures

    with pytest.raises(StepControlError):
        run_single(config, 0, raise_errors=True)


def test_histogram_is_normalised(two_level_text):
    config = parse_config(two_level_text(trajectories=3, S=2.0, ds=0.1, analysis="histogram = true"))
    ensemble = run_ensemble(config, workers=1)
    assert ensemble.histogram.samples == 3 * 20
    assert ensemble.histogram.mass() == pytest.approx(1.0, rel=1e-9)


def test_coherence_series(two_level_text):
    config = parse_config(
        two_level_text(p1=0.36, trajectories=8, S=2.0, ds=0.1, analysis="decay_fit = true")
    )
    ensemble = run_ensemble(config, workers=1)

    assert ensemble.coherence_s.shape == ensemble.coherence_mean.shape == (20,)
    assert ensemble.coherence_s[0] == -1.0
    assert ensemble.coherence_mean[0] == pytest.approx(0.48, rel=1e-9)
    assert ensemble.coherence_stderr[0] == pytest.approx(0.0, abs=1e-12)
    assert abs(ensemble.coherence_mean[-1]) < abs(ensemble.coherence_mean[0])

    report = analysis_reports(ensemble)["decay_fit"]
    assert "strength_estimate" in report or "error" in report


def test_martingale_report_needs_enough_trajectories(two_level_text):
    config = parse_config(
        two_level_text(trajectories=2, S=1.0, ds=0.1, analysis='martingale = ["x[0]"]')
    )
    (entry,) = analysis_reports(run_ensemble(config, workers=1))["martingale"]
    assert entry["observable"] == "x[0]"
    assert "at least 100" in entry["error"]


def test_free_drift_prediction_follows_the_hamiltonian(two_level_text):
    without_h = parse_config(two_level_text())
    assert predicted_free_drift(without_h, "t[0]") is None

    text = two_level_text().replace("[hamiltonian]\nenabled = false", "[hamiltonian]\nenabled = true")
    config = parse_config(text)
    record = run_single(config, 0).record
    drift = predicted_free_drift(config, "x[0]")
    assert drift(record) == pytest.approx(np.mean(record.series("p[0]")) / config.masses[0])
