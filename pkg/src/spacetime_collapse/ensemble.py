"""
Trajectory orchestration.

Each trajectory is rebuilt from the scenario inside its worker and seeded by
(seed, trajectory index), so results do not depend on the worker count.
Results are merged in index order.
"""

from __future__ import annotations

import concurrent.futures as cf
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .analysis import (
    SpacetimeHistogram,
    accumulate,
    average,
    born_statistics,
    empty_histogram,
    fit_decay_rate,
    martingale_report,
)
from .config import ScenarioConfig
from .dynamics import TrajectoryRecord, run_trajectory
from .errors import InsufficientSamplesError, SimulationError
from .grid import Basis, expectation
from .operators import boost_with_quality, collapse_mass
from .oracles import kg_relative_residual
from .telemetry import EventType, get_telemetry

logger = logging.getLogger("spacetime-collapse.ensemble")


@dataclass
class TrajectoryResult:
    index: int
    record: TrajectoryRecord | None = None
    histogram: SpacetimeHistogram | None = None
    coherence: np.ndarray | None = None
    kg_relative: float | None = None
    mu2: float | None = None
    error: str | None = None
    error_type: str | None = None


@dataclass
class EnsembleResult:
    config: ScenarioConfig
    results: list[TrajectoryResult]
    histogram: SpacetimeHistogram | None = None
    coherence_s: np.ndarray | None = None
    coherence_mean: np.ndarray | None = None
    coherence_stderr: np.ndarray | None = None
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def records(self) -> list[TrajectoryRecord]:
        return [r.record for r in self.results if r.record is not None]


def _branch_indices(config: ScenarioConfig) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    i = config.superposed_particle()
    if i is None or config.n_particles != 1:
        return None
    grid = config.grids()[0]
    (x0, t0), (x1, t1) = config.particles[0].points[:2]
    return (grid.index_of(x0, 0), grid.index_of(t0, 1)), (grid.index_of(x1, 0), grid.index_of(t1, 1))


def run_single(
    config: ScenarioConfig, index: int, keep_state: bool = False, raise_errors: bool = False
) -> TrajectoryResult:
    """Run one trajectory of the scenario and the per-trajectory analyses it requests"""
    result = TrajectoryResult(index)
    try:
        psi0 = config.initial_state()
        grids = psi0.grids
        H = config.hamiltonian()
        generators = config.generator_specs()
        run = config.run
        hist = [empty_histogram(grids, run.S)] if config.analysis.histogram else None
        branches = _branch_indices(config) if config.analysis.decay_fit else None
        coherence: list[complex] = []
        cell = grids[0].cell_volume(Basis.POSITION_TIME)

        def observer(s, psi):
            if hist is not None:
                hist[0] = accumulate(hist[0], psi, run.ds)
            if branches is not None:
                a = psi.amplitudes
                coherence.append(complex(a[branches[0]] * np.conj(a[branches[1]]) * cell))

        record = run_trajectory(
            psi0,
            H,
            generators,
            run.S,
            run.ds,
            run.seed,
            run.sample_every,
            trajectory=index,
            antithetic=run.antithetic,
            levels=config.born_levels(),
            snapshot_every=run.snapshot_every,
            observer=observer if (hist is not None or branches is not None) else None,
        )
        if config.analysis.kg_residual:
            final = record.final_state
            mass_ops = [g for g in generators if g.kind.value == "collapse_mass"] or [collapse_mass(0)]
            result.mu2 = -expectation(final, mass_ops[0])
            result.kg_relative = kg_relative_residual(final, result.mu2)
        if not keep_state:
            record.final_state = None
        result.record = record
        result.histogram = None if hist is None else hist[0]
        result.coherence = np.array(coherence) if branches is not None else None
    except SimulationError as e:
        if raise_errors:
            raise
        logger.warning(f"Trajectory {index} failed: {e}")
        result.error = str(e)
        result.error_type = type(e).__name__
    return result


def run_ensemble(
    config: ScenarioConfig,
    workers: int | None = None,
    keep_states: bool = False,
    raise_errors: bool = False,
) -> EnsembleResult:
    n = config.run.trajectories
    workers = max(1, min(workers or config.run.workers, n))
    logger.info(f"Running {n} trajectories of {config.name!r} on {workers} worker(s)")
    if workers == 1:
        results = [run_single(config, i, keep_states, raise_errors) for i in range(n)]
    else:
        results_by_index: dict[int, TrajectoryResult] = {}
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futures = {ex.submit(run_single, config, i, keep_states, raise_errors): i for i in range(n)}
            for f in cf.as_completed(futures):
                results_by_index[futures[f]] = f.result()
        results = [results_by_index[i] for i in range(n)]

    telemetry = get_telemetry()
    for r in results:
        rejected = r.record.rejected_steps if r.record is not None else 0
        telemetry.record_event(
            EventType.TRAJECTORY,
            stage=config.name,
            success=r.error is None,
            error_message=r.error,
            metadata={"trajectory": r.index, "rejected_steps": rejected},
        )
        if rejected:
            telemetry.record_event(EventType.STEP_REJECTED, stage=config.name, metadata={"trajectory": r.index, "count": rejected})

    ensemble = EnsembleResult(config, results)
    ensemble.failures = [
        {"trajectory": r.index, "error_type": r.error_type, "error": r.error} for r in results if r.error
    ]
    if ensemble.failures:
        logger.warning(f"{len(ensemble.failures)} of {n} trajectories failed")

    histograms = [r.histogram for r in results if r.histogram is not None]
    if histograms:
        ensemble.histogram = average(histograms)

    series = [r.coherence for r in results if r.coherence is not None]
    if series:
        stack = np.vstack(series)
        ensemble.coherence_s = -0.5 * config.run.S + config.run.ds * np.arange(stack.shape[1])
        ensemble.coherence_mean = stack.mean(axis=0)
        if stack.shape[0] > 1:
            spread = np.sqrt(stack.real.var(axis=0, ddof=1) + stack.imag.var(axis=0, ddof=1))
            ensemble.coherence_stderr = spread / math.sqrt(stack.shape[0])
        else:
            ensemble.coherence_stderr = np.zeros(stack.shape[1])
    return ensemble


def predicted_free_drift(config: ScenarioConfig, observable: str):
    """Expected drift per unit s for the observables with a known free drift"""
    H_on = config.hamiltonian_enabled
    for prefix, partner in (("t[", "E["), ("x[", "p[")):
        if observable.startswith(prefix) and H_on:
            i = int(observable[2:-1])
            mass = config.masses[i]
            return lambda record, name=f"{partner}{i}]": float(np.mean(record.series(name))) / mass
    return None


def decay_report(ensemble: EnsembleResult) -> dict:
    config = ensemble.config
    if ensemble.coherence_mean is None:
        return {"error": "decay fits need a single superposed particle"}
    levels = config.born_levels()
    if levels is None or len(levels) < 2:
        return {"error": "decay fits need two branches with known eigenvalues"}
    mags = np.abs(ensemble.coherence_mean)
    resolved = mags > 5 * ensemble.coherence_stderr
    try:
        fit = fit_decay_rate(ensemble.coherence_s[resolved], mags[resolved], levels[0] - levels[1])
    except (InsufficientSamplesError, ValueError) as e:
        return {"error": str(e)}
    configured = config.generators[0].strength
    return {
        "strength_estimate": fit.strength,
        "configured_strength": configured,
        "relative_error": abs(fit.strength - configured) / configured if configured else None,
        "points": fit.points,
        "slope_stderr": fit.slope_stderr,
    }


def _boost_report(config: ScenarioConfig) -> list[dict]:
    psi = config.initial_state()
    out = []
    for theta in config.analysis.boost_thetas:
        reference = [expectation(psi, collapse_mass(i)) for i in range(config.n_particles)]
        try:
            boosted, deviation = boost_with_quality(psi, theta)
        except SimulationError as e:
            out.append({"theta": theta, "error": str(e)})
            continue
        after = [expectation(boosted, collapse_mass(i)) for i in range(config.n_particles)]
        out.append(
            {
                "theta": theta,
                "norm_deviation": deviation,
                "mass_shell_before": reference,
                "mass_shell_after": after,
                "relative_change": [abs(a - b) / max(abs(b), 1e-300) for a, b in zip(after, reference)],
            }
        )
    return out


def analysis_reports(ensemble: EnsembleResult) -> dict[str, Any]:
    """Reports requested by the [analysis] table"""
    config = ensemble.config
    records = ensemble.records
    reports: dict[str, Any] = {"trajectories": len(ensemble.results), "failures": ensemble.failures}
    if config.analysis.born:
        try:
            reports["born"] = born_statistics(
                [r.outcome for r in records], config.born_probabilities()
            ).to_dict()
        except InsufficientSamplesError as e:
            reports["born"] = {"error": str(e)}
    if config.analysis.martingale:
        table = []
        for name in config.analysis.martingale:
            try:
                table.append(martingale_report(records, name, predicted_free_drift(config, name)).to_dict())
            except (InsufficientSamplesError, KeyError) as e:
                table.append({"observable": name, "error": str(e)})
        reports["martingale"] = table
    if config.analysis.decay_fit:
        reports["decay_fit"] = decay_report(ensemble)
    if config.analysis.kg_residual:
        values = [r.kg_relative for r in ensemble.results if r.kg_relative is not None]
        reports["kg_residual"] = {
            "relative_max": max(values) if values else None,
            "relative_mean": float(np.mean(values)) if values else None,
            "mu2": [r.mu2 for r in ensemble.results if r.mu2 is not None],
        }
    if config.analysis.boost_thetas:
        reports["boost"] = _boost_report(config)
    return reports
