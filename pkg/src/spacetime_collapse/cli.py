"""
Command-line entry point: simulate, ensemble, master, validate, analyze.

Machine-readable results go to stdout or the output directory; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import born_statistics, martingale_report
from .config import DEFAULT_LOG_LEVEL, ScenarioConfig, config_from_dict, load_config, required_trajectories
from .ensemble import analysis_reports, predicted_free_drift, run_ensemble
from .errors import ConfigError, SimulationError, StepControlError
from .grid import Basis, DensityMatrix
from .master import MAX_RATE_STEP, decay_solution, evolve_master, example_collapse, example_no_collapse, max_rate
from .persistence import (
    read_histogram_csv,
    read_trajectories,
    write_histogram_csv,
    write_report,
    write_snapshot,
    write_trajectories,
)
from .telemetry import EventType, get_telemetry, record_startup
from .telemetry_decorator import timed_stage
from .validation import ValidationOptions, list_checks, run_checks

logger = logging.getLogger("spacetime-collapse.cli")

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STEP_CONTROL = 3


def _load(args) -> ScenarioConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "workers", None) is not None:
        config = config.with_workers(args.workers)
    return config


def _out_dir(args, config: ScenarioConfig) -> Path:
    return Path(args.out) if args.out else Path(config.output_dir)


def _header(config: ScenarioConfig) -> dict:
    return {**config.metadata(), "config": config.source}


def _write_histograms(out: Path, config: ScenarioConfig, histogram) -> list[Path]:
    if histogram is None:
        return []
    return [
        write_histogram_csv(out / f"histogram_p{i}.csv", config.metadata(), histogram, i)
        for i in range(config.n_particles)
    ]


@timed_stage("simulate", options=("config", "seed", "workers"))
def cmd_simulate(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    ensemble = run_ensemble(config, config.run.workers, raise_errors=True)
    records = ensemble.records
    path = write_trajectories(out / "trajectories.jsonl", _header(config), records)
    for record in records:
        for k, (s, state) in enumerate(record.snapshots):
            write_snapshot(out / "snapshots" / f"traj{record.trajectory:05d}_{k:04d}.snap", config.metadata(), state, s)
    _write_histograms(out, config, ensemble.histogram)
    logger.info(f"Wrote {len(records)} trajectories to {path}")
    print(json.dumps({"trajectories": len(records), "output": str(path)}, sort_keys=True))
    return 0


@timed_stage("ensemble", options=("config", "seed", "workers"))
def cmd_ensemble(args) -> int:
    config = _load(args)
    required_trajectories(config, 2)
    out = _out_dir(args, config)
    ensemble = run_ensemble(config, config.run.workers)
    write_trajectories(out / "trajectories.jsonl", _header(config), ensemble.records)
    _write_histograms(out, config, ensemble.histogram)
    reports = analysis_reports(ensemble)
    write_report(out / "report.json", config.metadata(), reports)
    print(json.dumps(reports, sort_keys=True, indent=2, default=str))
    return 0


def _master_from_config(config: ScenarioConfig) -> dict:
    psi = config.initial_state()
    rho0 = DensityMatrix.from_state(psi)
    H = config.hamiltonian()
    generators = config.generator_specs()
    rate = max_rate(rho0, H, generators)
    if rate * config.run.ds > MAX_RATE_STEP:
        raise ConfigError(
            f"run.ds = {config.run.ds:g} is too large for the master equation: the fastest mode decays "
            f"at rate {rate:.6g}, so ds must not exceed {MAX_RATE_STEP / rate:.6g}",
            config.path,
        )
    n_steps = round(config.run.S / config.run.ds)
    populated = np.flatnonzero(np.abs(rho0.diagonal()) > 1e-12)
    track = [(int(i), int(j)) for k, i in enumerate(populated) for j in populated[k + 1:]]
    evolution = evolve_master(
        rho0, H, generators, config.run.ds, n_steps, track=track, check_positivity=rho0.dim <= 256
    )
    report: dict = {
        "dimension": rho0.dim,
        "S": config.run.S,
        "min_eigenvalue": None if evolution.min_eigenvalues is None else float(np.min(evolution.min_eigenvalues)),
        "off_diagonal": [],
    }
    try:
        exact = decay_solution(rho0, generators, config.run.S, H)
    except SimulationError as e:
        logger.info(f"No closed form for this scenario: {e}")
        exact = None
    stride = max(1, n_steps // 20)
    for pair in track:
        series = np.abs(evolution.elements[pair])
        entry = {
            "i": rho0.basis_labels[pair[0]].describe(),
            "j": rho0.basis_labels[pair[1]].describe(),
            "s": evolution.s_values[::stride].tolist(),
            "magnitude": series[::stride].tolist(),
        }
        if exact is not None:
            entry["closed_form"] = abs(exact.element(*pair))
            entry["deviation"] = abs(abs(evolution.final.element(*pair)) - entry["closed_form"])
        report["off_diagonal"].append(entry)
    return report


@timed_stage("master", options=("config", "example", "s_lambda"))
def cmd_master(args) -> int:
    if args.example == "no-collapse":
        report = example_no_collapse().to_dict()
        metadata = {"example": "no-collapse"}
    elif args.example == "collapse":
        report = example_collapse(args.L, args.C, args.R, args.s_lambda, 1.0).to_dict()
        metadata = {"example": "collapse"}
    else:
        if not args.config:
            raise ConfigError("master needs --config or --example")
        config = _load(args)
        report = _master_from_config(config)
        metadata = config.metadata()
    if args.out:
        write_report(Path(args.out) / "master.json", metadata, report)
    print(json.dumps(report, sort_keys=True, indent=2, default=str))
    return 0


def _format_value(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value:.6g}"


@timed_stage("validate", options=("only", "seed", "workers"))
def cmd_validate(args) -> int:
    if args.list:
        for name, reference in list_checks():
            print(f"{name:24s} {reference}")
        return 0
    options = ValidationOptions(workers=args.workers or 1)
    if args.seed is not None:
        options.seed = args.seed
    try:
        results = run_checks(args.only, options)
    except KeyError as e:
        raise ConfigError(str(e.args[0]))
    print(f"{'check':24s} {'measured':>14s} {'expected':>14s} {'tolerance':>12s}  pass  reference")
    for r in results:
        print(
            f"{r.name:24s} {_format_value(r.measured):>14s} {_format_value(r.expected):>14s} "
            f"{_format_value(r.tolerance):>12s}  {'yes ' if r.passed else 'NO  '}  {r.reference}"
            + (f" ({r.detail})" if r.detail else "")
        )
    if args.out:
        write_report(
            Path(args.out) / "validation.json",
            {"seed": options.seed, "version": __version__},
            {"checks": [r.to_dict() for r in results]},
        )
    failed = [r for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} checks failed")
        return EXIT_FAILURE
    return 0


def _histogram_summaries(out: Path, config: ScenarioConfig) -> list[dict]:
    """Mass and mean event of every stored per-particle histogram"""
    summaries = []
    for i, grid in enumerate(config.grids()):
        path = out / f"histogram_p{i}.csv"
        if not path.exists():
            logger.warning(f"No histogram for particle {i} in {out}")
            continue
        metadata, rows = read_histogram_csv(path)
        weights = rows[:, 2] * grid.cell_volume(Basis.POSITION_TIME)
        mass = float(weights.sum())
        summaries.append(
            {
                "particle": i,
                "samples": int(metadata.get("samples", 0)),
                "mass": mass,
                "mean_x": float(weights @ rows[:, 0]) / mass if mass > 0 else None,
                "mean_t": float(weights @ rows[:, 1]) / mass if mass > 0 else None,
            }
        )
    return summaries


@timed_stage("analyze", options=("config", "out"))
def cmd_analyze(args) -> int:
    out = Path(args.out)
    header, records = read_trajectories(out / "trajectories.jsonl")
    if args.config:
        config = load_config(args.config)
    elif "config" in header:
        config = config_from_dict(header["config"], str(out / "trajectories.jsonl"))
    else:
        raise ConfigError("trajectory header carries no scenario; pass --config", str(out / "trajectories.jsonl"), 1)
    if config.config_hash() != header.get("config_hash"):
        logger.warning("Scenario hash differs from the one recorded in the trajectory file")
    reports: dict = {"trajectories": len(records)}
    if config.analysis.born:
        try:
            reports["born"] = born_statistics([r.outcome for r in records], config.born_probabilities()).to_dict()
        except SimulationError as e:
            reports["born"] = {"error": str(e)}
    if config.analysis.martingale:
        table = []
        for name in config.analysis.martingale:
            try:
                table.append(martingale_report(records, name, predicted_free_drift(config, name)).to_dict())
            except (SimulationError, KeyError) as e:
                table.append({"observable": name, "error": str(e)})
        reports["martingale"] = table
    if config.analysis.histogram:
        reports["histogram"] = _histogram_summaries(out, config)
    metadata = {k: header[k] for k in ("schema_version", "config_hash", "seed", "scenario") if k in header}
    write_report(out / "analysis.json", metadata, reports)
    print(json.dumps(reports, sort_keys=True, indent=2, default=str))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacetime-collapse",
        description="Relativistic continuous-collapse simulator with quantised time variables",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=DEFAULT_LOG_LEVEL, help="logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario(p, config_required=True):
        p.add_argument("--config", required=config_required, help="scenario TOML file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--workers", type=int, help="worker processes (default: run.workers)")
        p.add_argument("--out", help="output directory (default: output.directory)")

    p = sub.add_parser("simulate", help="run trajectories and write their observable series")
    scenario(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ensemble", help="run an ensemble and write the requested statistics")
    scenario(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("master", help="evolve the density-matrix master equation")
    scenario(p, config_required=False)
    p.add_argument("--example", choices=("no-collapse", "collapse"), help="built-in two-particle example")
    p.add_argument("--L", type=float, default=0.0, help="left position (collapse example)")
    p.add_argument("--C", type=float, default=1.0, help="second particle position (collapse example)")
    p.add_argument("--R", type=float, default=3.0, help="right position (collapse example)")
    p.add_argument("--s-lambda", type=float, default=1.0, help="S * lambda (collapse example)")
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("validate", help="run the oracle checks")
    p.add_argument("--only", nargs="+", metavar="CHECK", help="run only these checks")
    p.add_argument("--list", action="store_true", help="list checks without running them")
    p.add_argument("--workers", type=int, help="worker processes for ensemble checks")
    p.add_argument("--seed", type=int, help="base seed for the stochastic checks")
    p.add_argument("--out", help="also write validation.json here")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("analyze", help="recompute reports from stored trajectories")
    p.add_argument("--out", required=True, help="directory holding trajectories.jsonl")
    p.add_argument("--config", help="scenario file (default: the one embedded in the trajectory file)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )
    record_startup(args.command)
    telemetry = get_telemetry()
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except StepControlError as e:
        logger.error(f"Step control failed at trajectory {e.trajectory}, s={e.s}: {e} (try ds={e.suggested_ds:.3g})")
        telemetry.record_event(EventType.ERROR, stage=args.command, success=False, error_message=str(e))
        return EXIT_STEP_CONTROL
    except SimulationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        telemetry.record_event(EventType.ERROR, stage=args.command, success=False, error_message=str(e))
        return EXIT_FAILURE
    finally:
        telemetry.flush()


if __name__ == "__main__":
    sys.exit(main())
