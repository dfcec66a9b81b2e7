"""
Scenario files.

A scenario is a TOML document with the tables [grid], [[particles]],
[hamiltonian], [[generators]], [run], [analysis] and [output]. Every module
precondition is checked when the file is loaded, and errors point at the line
of the offending key.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomli
except ImportError:
    try:
        import tomllib as tomli
    except ImportError:
        tomli = None

from .errors import ConfigError, SimulationError
from .grid import Basis, GridSpec, WaveFunction, make_grid, superposition_state
from .oracles import GaussianParams, gaussian_state
from .operators import (
    OperatorSpec,
    collapse_mass,
    energy,
    hamiltonian_multi,
    interval_operator,
    momentum,
    pairwise_interval_generators,
    position,
    time,
    with_strength,
)

logger = logging.getLogger("spacetime-collapse.config")

SCHEMA_VERSION = 1

# Default configuration
DEFAULT_WORKERS = int(os.getenv("SPACETIME_COLLAPSE_WORKERS", "1"))
DEFAULT_LOG_LEVEL = os.getenv("SPACETIME_COLLAPSE_LOG_LEVEL", "INFO")

GENERATOR_KINDS = {
    "collapse_mass": 1,
    "interval": 2,
    "position": 1,
    "time": 1,
    "energy": 1,
    "momentum": 1,
    # every pair of particles, optionally with a mass generator per particle
    "pairwise_intervals": None,
}


@dataclass(frozen=True)
class GridConfig:
    n_x: int
    n_t: int
    dx: float
    dt: float
    centre_x: float = 0.0
    centre_t: float = 0.0
    centre_p: float = 0.0
    centre_E: float = 0.0


@dataclass(frozen=True)
class ParticleConfig:
    kind: str
    gaussian: GaussianParams | None = None
    points: tuple[tuple[float, float], ...] = ()
    amplitudes: tuple[complex, ...] = ()
    centres: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str
    particles: tuple[int, ...]
    strength: float
    mass_strength: float | None = None


@dataclass(frozen=True)
class RunConfig:
    S: float
    ds: float
    sample_every: int = 1
    trajectories: int = 1
    seed: int = 0
    workers: int = DEFAULT_WORKERS
    antithetic: bool = False
    snapshot_every: int = 0


@dataclass(frozen=True)
class AnalysisConfig:
    decay_fit: bool = False
    born: bool = False
    martingale: tuple[str, ...] = ()
    histogram: bool = False
    kg_residual: bool = False
    boost_thetas: tuple[float, ...] = ()


@dataclass(frozen=True)
class ScenarioConfig:
    """Parsed and validated scenario"""
    name: str
    grid: GridConfig
    particles: tuple[ParticleConfig, ...]
    masses: tuple[float, ...]
    hamiltonian_enabled: bool
    generators: tuple[GeneratorConfig, ...]
    run: RunConfig
    analysis: AnalysisConfig
    output_dir: str
    source: dict = field(compare=False, repr=False, default_factory=dict)
    path: str | None = field(compare=False, default=None)

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    def grids(self) -> tuple[GridSpec, ...]:
        out = []
        for particle in self.particles:
            g = self.grid
            centres = {
                "centre_x": g.centre_x,
                "centre_t": g.centre_t,
                "centre_p": g.centre_p,
                "centre_E": g.centre_E,
            }
            centres.update(particle.centres)
            out.append(make_grid(g.n_x, g.n_t, g.dx, g.dt, **centres))
        return tuple(out)

    def initial_state(self) -> WaveFunction:
        """Product of the per-particle states, in the position-time basis"""
        factors = []
        for particle, grid in zip(self.particles, self.grids()):
            if particle.kind == "gaussian":
                psi = gaussian_state(particle.gaussian, (grid,))
            else:
                psi = superposition_state((grid,), [[p] for p in particle.points], particle.amplitudes)
            factors.append(psi.amplitudes)
        amplitudes = factors[0]
        for f in factors[1:]:
            amplitudes = np.multiply.outer(amplitudes, f)
        return WaveFunction(self.grids(), amplitudes, Basis.POSITION_TIME).normalized()

    def hamiltonian(self) -> OperatorSpec | None:
        if not self.hamiltonian_enabled:
            return None
        return hamiltonian_multi(self.masses)

    def generator_specs(self) -> list[OperatorSpec]:
        builders = {
            "collapse_mass": collapse_mass,
            "interval": interval_operator,
            "position": position,
            "time": time,
        }
        specs = []
        for g in self.generators:
            if g.kind == "pairwise_intervals":
                specs.extend(pairwise_interval_generators(len(g.particles), g.strength, g.mass_strength))
            elif g.kind in builders:
                specs.append(builders[g.kind](*g.particles, strength=g.strength))
            else:
                op = energy(*g.particles) if g.kind == "energy" else momentum(*g.particles)
                specs.append(with_strength(op, g.strength))
        return specs

    def superposed_particle(self) -> int | None:
        for i, particle in enumerate(self.particles):
            if particle.kind == "superposition" and len(particle.points) > 1:
                return i
        return None

    def born_levels(self) -> list[float] | None:
        """Eigenvalues of the first generator on the superposed branches, in branch order"""
        i = self.superposed_particle()
        if i is None or not self.generators:
            return None
        first = self.generator_specs()[0]
        if first.diagonal_basis is not Basis.POSITION_TIME or first.particles != (i,):
            return None
        levels = []
        for x, t in self.particles[i].points:
            coords = [(np.asarray(0.0), np.asarray(0.0))] * self.n_particles
            coords[i] = (np.asarray(float(x)), np.asarray(float(t)))
            levels.append(float(first.eigenvalue(coords)))
        return levels

    def born_probabilities(self) -> list[float] | None:
        i = self.superposed_particle()
        if i is None:
            return None
        weights = np.abs(np.asarray(self.particles[i].amplitudes)) ** 2
        return (weights / weights.sum()).tolist()

    def with_seed(self, seed: int) -> "ScenarioConfig":
        source = json.loads(json.dumps(self.source))
        source.setdefault("run", {})["seed"] = seed
        return replace(self, run=replace(self.run, seed=seed), source=source)

    def with_workers(self, workers: int) -> "ScenarioConfig":
        return replace(self, run=replace(self.run, workers=workers))

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of the scenario, worker count excluded"""
        data = json.loads(json.dumps(self.source, default=str))
        data.get("run", {}).pop("workers", None)
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def metadata(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash(),
            "seed": self.run.seed,
            "scenario": self.name,
        }


class _Locator:
    """Maps table/key pairs back to line numbers in the TOML source"""

    _header = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-]+)\s*\]\]?")
    _key = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")

    def __init__(self, text: str, path: str | None):
        self.path = path
        self._lines: dict[tuple[str, int, str], int] = {}
        self._tables: dict[tuple[str, int], int] = {}
        counts: dict[str, int] = {}
        table, index = "", 0
        for lineno, line in enumerate(text.splitlines(), start=1):
            header = self._header.match(line)
            if header:
                table = header.group(2)
                if header.group(1) == "[[":
                    index = counts.get(table, -1) + 1
                    counts[table] = index
                else:
                    index = 0
                self._tables.setdefault((table, index), lineno)
                continue
            key = self._key.match(line)
            if key:
                self._lines.setdefault((table, index, key.group(1)), lineno)

    def line(self, table: str, index: int = 0, key: str | None = None) -> int | None:
        if key is not None and (table, index, key) in self._lines:
            return self._lines[(table, index, key)]
        return self._tables.get((table, index))

    def error(self, message: str, table: str, index: int = 0, key: str | None = None) -> ConfigError:
        label = f"[{table}]" if not key else f"{table}.{key}"
        return ConfigError(f"{label}: {message}", self.path, self.line(table, index, key))


def _number(loc: _Locator, data: dict, table: str, key: str, index: int = 0, default=None, positive=False):
    if key not in data:
        if default is None:
            raise loc.error("missing required key", table, index, key)
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise loc.error(f"expected a finite number, got {value!r}", table, index, key)
    if positive and value <= 0:
        raise loc.error(f"must be positive, got {value}", table, index, key)
    return value


def _integer(loc: _Locator, data: dict, table: str, key: str, index: int = 0, default=None, minimum=None):
    if key not in data:
        if default is None:
            raise loc.error("missing required key", table, index, key)
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise loc.error(f"expected an integer, got {value!r}", table, index, key)
    if minimum is not None and value < minimum:
        raise loc.error(f"must be at least {minimum}, got {value}", table, index, key)
    return value


def _complex(value: Any) -> complex:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    return complex(float(value))


def _parse_grid(loc: _Locator, data: dict) -> GridConfig:
    if "grid" not in data:
        raise ConfigError("missing [grid] table", loc.path)
    g = data["grid"]
    cfg = GridConfig(
        n_x=_integer(loc, g, "grid", "n_x"),
        n_t=_integer(loc, g, "grid", "n_t"),
        dx=_number(loc, g, "grid", "dx", positive=True),
        dt=_number(loc, g, "grid", "dt", positive=True),
        centre_x=_number(loc, g, "grid", "centre_x", default=0.0),
        centre_t=_number(loc, g, "grid", "centre_t", default=0.0),
        centre_p=_number(loc, g, "grid", "centre_p", default=0.0),
        centre_E=_number(loc, g, "grid", "centre_E", default=0.0),
    )
    try:
        make_grid(cfg.n_x, cfg.n_t, cfg.dx, cfg.dt)
    except SimulationError as e:
        raise loc.error(str(e), "grid") from e
    return cfg


def _parse_particle(loc: _Locator, p: dict, index: int) -> ParticleConfig:
    kind = p.get("kind", "gaussian")
    centres = {
        key: _number(loc, p, "particles", key, index)
        for key in ("centre_x", "centre_t", "centre_p", "centre_E")
        if key in p
    }
    if kind == "gaussian":
        try:
            params = GaussianParams(
                sigma_x=_number(loc, p, "particles", "sigma_x", index),
                sigma_t=_number(loc, p, "particles", "sigma_t", index),
                x_bar=_number(loc, p, "particles", "x_bar", index, default=0.0),
                t_bar=_number(loc, p, "particles", "t_bar", index, default=0.0),
                p_bar=_number(loc, p, "particles", "p_bar", index, default=0.0),
                E_bar=_number(loc, p, "particles", "E_bar", index, default=0.0),
                mass=_number(loc, p, "particles", "mass", index, default=1.0),
            )
        except SimulationError as e:
            raise loc.error(str(e), "particles", index) from e
        return ParticleConfig("gaussian", gaussian=params, centres=centres)
    if kind == "superposition":
        points = p.get("points")
        amplitudes = p.get("amplitudes")
        if not isinstance(points, list) or not points:
            raise loc.error("expected a non-empty list of [x, t] points", "particles", index, "points")
        if any(not isinstance(pt, list) or len(pt) != 2 for pt in points):
            raise loc.error("every point must be an [x, t] pair", "particles", index, "points")
        if not isinstance(amplitudes, list) or len(amplitudes) != len(points):
            raise loc.error("one amplitude is needed per point", "particles", index, "amplitudes")
        try:
            amps = tuple(_complex(a) for a in amplitudes)
        except (TypeError, ValueError) as e:
            raise loc.error(f"amplitudes must be numbers or [re, im] pairs ({e})", "particles", index, "amplitudes") from e
        if sum(abs(a) ** 2 for a in amps) == 0:
            raise loc.error("amplitudes are all zero", "particles", index, "amplitudes")
        return ParticleConfig(
            "superposition",
            points=tuple((float(x), float(t)) for x, t in points),
            amplitudes=amps,
            centres=centres,
        )
    raise loc.error(f"unknown particle kind {kind!r} (expected 'gaussian' or 'superposition')", "particles", index, "kind")


def _parse_generators(loc: _Locator, data: list, n_particles: int) -> tuple[GeneratorConfig, ...]:
    out = []
    for index, g in enumerate(data):
        kind = g.get("kind")
        if kind not in GENERATOR_KINDS:
            raise loc.error(f"unknown generator kind {kind!r}; expected one of {sorted(GENERATOR_KINDS)}", "generators", index, "kind")
        arity = GENERATOR_KINDS[kind]
        if arity is None:
            if "particles" in g:
                raise loc.error(f"{kind} acts on every particle; remove the particle list", "generators", index, "particles")
            if n_particles < 2:
                raise loc.error(f"{kind} needs at least two particles", "generators", index, "kind")
            particles = list(range(n_particles))
        else:
            particles = g.get("particles", [0] if arity == 1 else None)
        if (
            not isinstance(particles, list)
            or (arity is not None and len(particles) != arity)
            or any(isinstance(i, bool) or not isinstance(i, int) for i in particles)
        ):
            raise loc.error(f"{kind} acts on {arity} particle index(es)", "generators", index, "particles")
        if any(i < 0 or i >= n_particles for i in particles):
            raise loc.error(f"particle index out of range for {n_particles} particle(s)", "generators", index, "particles")
        if len(set(particles)) != len(particles):
            raise loc.error("particle indices must differ", "generators", index, "particles")
        strength = _number(loc, g, "generators", "strength", index)
        if strength < 0:
            raise loc.error("must be non-negative", "generators", index, "strength")
        mass_strength = None
        if "mass_strength" in g:
            if arity is not None:
                raise loc.error(f"mass_strength only applies to pairwise_intervals, not {kind}", "generators", index, "mass_strength")
            mass_strength = float(_number(loc, g, "generators", "mass_strength", index))
            if mass_strength < 0:
                raise loc.error("must be non-negative", "generators", index, "mass_strength")
        out.append(GeneratorConfig(kind, tuple(particles), float(strength), mass_strength))
    return tuple(out)


def _parse_run(loc: _Locator, r: dict) -> RunConfig:
    S = _number(loc, r, "run", "S", positive=True)
    ds = _number(loc, r, "run", "ds", positive=True)
    n = round(S / ds)
    if n < 1 or abs(n * ds - S) > 1e-9 * S:
        raise loc.error(f"ds={ds} does not divide S={S}", "run", key="ds")
    seed = _integer(loc, r, "run", "seed", default=0, minimum=0)
    if seed >= 2 ** 64:
        raise loc.error("seed must fit in 64 bits", "run", key="seed")
    antithetic = r.get("antithetic", False)
    if not isinstance(antithetic, bool):
        raise loc.error("expected true or false", "run", key="antithetic")
    return RunConfig(
        S=float(S),
        ds=float(ds),
        sample_every=_integer(loc, r, "run", "sample_every", default=1, minimum=1),
        trajectories=_integer(loc, r, "run", "trajectories", default=1, minimum=1),
        seed=seed,
        workers=_integer(loc, r, "run", "workers", default=DEFAULT_WORKERS, minimum=1),
        antithetic=antithetic,
        snapshot_every=_integer(loc, r, "run", "snapshot_every", default=0, minimum=0),
    )


def _parse_analysis(loc: _Locator, a: dict) -> AnalysisConfig:
    for key in ("decay_fit", "born", "histogram", "kg_residual"):
        if key in a and not isinstance(a[key], bool):
            raise loc.error("expected true or false", "analysis", key=key)
    martingale = a.get("martingale", [])
    if not isinstance(martingale, list) or any(not isinstance(m, str) for m in martingale):
        raise loc.error("expected a list of observable names", "analysis", key="martingale")
    thetas = a.get("boost_thetas", [])
    if not isinstance(thetas, list) or any(
        isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) for x in thetas
    ):
        raise loc.error("expected a list of finite rapidities", "analysis", key="boost_thetas")
    return AnalysisConfig(
        decay_fit=a.get("decay_fit", False),
        born=a.get("born", False),
        martingale=tuple(martingale),
        histogram=a.get("histogram", False),
        kg_residual=a.get("kg_residual", False),
        boost_thetas=tuple(float(x) for x in thetas),
    )


def _toml_error(e: Exception, path: str | None) -> ConfigError:
    match = re.search(r"line (\d+)", str(e))
    return ConfigError(f"invalid TOML: {e}", path, int(match.group(1)) if match else None)


def parse_config(text: str, path: str | None = None) -> ScenarioConfig:
    """Parse and validate scenario text"""
    if tomli is None:
        raise ConfigError("no TOML parser available; install tomli", path)
    try:
        data = tomli.loads(text)
    except Exception as e:
        raise _toml_error(e, path) from e
    return _build_config(data, _Locator(text, path))


def config_from_dict(data: dict, path: str | None = None) -> ScenarioConfig:
    """Rebuild a scenario from its parsed source, as embedded in trajectory file headers"""
    return _build_config(json.loads(json.dumps(data)), _Locator("", path))


def _build_config(data: dict, loc: _Locator) -> ScenarioConfig:
    path = loc.path
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}", path, loc.line("", 0, "schema_version")
        )
    grid = _parse_grid(loc, data)

    particle_tables = data.get("particles")
    if not isinstance(particle_tables, list) or not particle_tables:
        raise ConfigError("at least one [[particles]] table is required", path)
    particles = tuple(_parse_particle(loc, p, i) for i, p in enumerate(particle_tables))

    h = data.get("hamiltonian", {})
    enabled = h.get("enabled", True)
    if not isinstance(enabled, bool):
        raise loc.error("expected true or false", "hamiltonian", key="enabled")
    default_masses = [p.gaussian.mass if p.gaussian else 1.0 for p in particles]
    masses = h.get("masses", default_masses)
    if not isinstance(masses, list) or len(masses) != len(particles):
        raise loc.error(f"expected one mass per particle ({len(particles)})", "hamiltonian", key="masses")
    if any(isinstance(m, bool) or not isinstance(m, (int, float)) or not m > 0 for m in masses):
        raise loc.error("masses must be positive", "hamiltonian", key="masses")

    generators = _parse_generators(loc, data.get("generators", []), len(particles))
    if "run" not in data:
        raise ConfigError("missing [run] table", path)
    run = _parse_run(loc, data["run"])
    analysis = _parse_analysis(loc, data.get("analysis", {}))
    output_dir = data.get("output", {}).get("directory", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise loc.error("expected a directory path", "output", key="directory")

    config = ScenarioConfig(
        name=str(data.get("name", Path(path).stem if path else "scenario")),
        grid=grid,
        particles=particles,
        masses=tuple(float(m) for m in masses),
        hamiltonian_enabled=enabled,
        generators=generators,
        run=run,
        analysis=analysis,
        output_dir=output_dir,
        source=data,
        path=path,
    )
    _check_buildable(config, loc)
    known = particle_observables(config)
    unknown = [name for name in config.analysis.martingale if name not in known]
    if unknown:
        raise loc.error(f"unknown observable(s) {unknown}; expected names from {list(known)}", "analysis", key="martingale")
    if config.analysis.born and config.born_levels() is None:
        raise loc.error(
            "Born statistics need a superposed particle and a position-time generator on it as the first generator",
            "analysis",
            key="born",
        )
    return config


def _check_buildable(config: ScenarioConfig, loc: _Locator) -> None:
    for i, particle in enumerate(config.particles):
        try:
            grid = config.grids()[i]
            if particle.kind == "gaussian":
                gaussian_state(particle.gaussian, (grid,))
            else:
                superposition_state((grid,), [[p] for p in particle.points], particle.amplitudes)
        except SimulationError as e:
            raise loc.error(str(e), "particles", i) from e
    if math.prod(config.grid.n_x * config.grid.n_t for _ in config.particles) > 2 ** 24:
        raise ConfigError("joint lattice exceeds 2^24 points", config.path, loc.line("grid"))


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario: {e}", path) from e
    config = parse_config(text, path)
    logger.info(f"Loaded scenario {config.name!r} ({config.n_particles} particle(s), hash {config.config_hash()[:12]})")
    return config


def required_trajectories(config: ScenarioConfig, minimum: int) -> None:
    if config.run.trajectories < minimum:
        raise ConfigError(
            f"run.trajectories must be at least {minimum}, got {config.run.trajectories}", config.path
        )


def particle_observables(config: ScenarioConfig) -> Sequence[str]:
    """Names of the series every trajectory of this scenario records"""
    names = [op.name for op in config.generator_specs()]
    for i in range(config.n_particles):
        names.extend([f"E[{i}]", f"t[{i}]", f"x[{i}]", f"p[{i}]"])
    return names
