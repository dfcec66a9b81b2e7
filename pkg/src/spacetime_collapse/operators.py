"""
Hamiltonians, collapse generators and Poincare transformations.

Every operator is diagonal in either the momentum-energy or the position-time
basis and is described by its eigenvalue function on lattice coordinates.
Boosts and translations are applied as finite maps on the momentum-energy
amplitudes rather than as exponentials of the generators.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import BasisMismatchError, OperatorError
from .grid import Basis, DensityMatrix, GridSpec, WaveFunction, check_support, lattice_coordinates

logger = logging.getLogger("spacetime-collapse.operators")

Coordinates = Sequence[tuple[np.ndarray, np.ndarray]]
EigenvalueFn = Callable[[Coordinates], np.ndarray]


class OperatorKind(str, Enum):
    MASS_SHELL = "mass_shell"
    COLLAPSE_MASS = "collapse_mass"
    INTERVAL = "interval"
    ENERGY = "energy"
    TIME = "time"
    POSITION = "position"
    MOMENTUM = "momentum"


DIAGONAL_BASIS = {
    OperatorKind.MASS_SHELL: Basis.MOMENTUM_ENERGY,
    OperatorKind.COLLAPSE_MASS: Basis.MOMENTUM_ENERGY,
    OperatorKind.ENERGY: Basis.MOMENTUM_ENERGY,
    OperatorKind.MOMENTUM: Basis.MOMENTUM_ENERGY,
    OperatorKind.INTERVAL: Basis.POSITION_TIME,
    OperatorKind.TIME: Basis.POSITION_TIME,
    OperatorKind.POSITION: Basis.POSITION_TIME,
}


@dataclass(frozen=True)
class OperatorSpec:
    """
    A basis-diagonal operator.

    `strength` is the collapse rate lambda for generators (units of
    1/([eigenvalue]^2 * [s])) and is ignored for Hamiltonians and observables.
    """
    kind: OperatorKind
    particles: tuple[int, ...]
    eigenvalue: EigenvalueFn = field(compare=False, repr=False)
    strength: float = 0.0
    masses: tuple[float, ...] = ()
    label: str = ""

    @property
    def diagonal_basis(self) -> Basis:
        return DIAGONAL_BASIS[self.kind]

    @property
    def name(self) -> str:
        return self.label or f"{self.kind.value}{list(self.particles)}"

    def _check_particles(self, n_particles: int) -> None:
        if self.particles and max(self.particles) >= n_particles:
            raise OperatorError(
                f"{self.name} acts on particle {max(self.particles)} but the state has {n_particles}"
            )

    def evaluate(self, grids: Sequence[GridSpec]) -> np.ndarray:
        """Eigenvalues on the lattice, broadcastable to the amplitude shape"""
        grids = tuple(grids)
        self._check_particles(len(grids))
        return _lattice_eigenvalues(self, grids)

    def evaluate_on(self, rho: DensityMatrix) -> np.ndarray:
        """Eigenvalues on each basis vector of a density matrix"""
        if rho.basis is not self.diagonal_basis:
            raise BasisMismatchError(
                f"{self.name} is diagonal in {self.diagonal_basis.value}, density matrix is in {rho.basis.value}"
            )
        self._check_particles(rho.n_particles)
        values = np.asarray(self.eigenvalue(rho.coordinate_arrays()), dtype=float)
        return np.broadcast_to(values, (rho.dim,)).copy()


@functools.lru_cache(maxsize=64)
def _lattice_eigenvalues(op: OperatorSpec, grids: tuple[GridSpec, ...]) -> np.ndarray:
    values = np.asarray(op.eigenvalue(lattice_coordinates(grids, op.diagonal_basis)), dtype=float)
    values.flags.writeable = False
    return values


def _positive_mass(m: float) -> float:
    if not math.isfinite(m) or m <= 0:
        raise OperatorError(f"mass constant must be positive, got {m}")
    return float(m)


def hamiltonian_single(m: float) -> OperatorSpec:
    """(p^2 - E^2) / 2m for a single particle"""
    return hamiltonian_multi([m])


def hamiltonian_multi(masses: Sequence[float]) -> OperatorSpec:
    """Sum over particles of (p_i^2 - E_i^2) / 2m_i"""
    if len(masses) == 0:
        raise OperatorError("hamiltonian_multi needs at least one mass")
    ms = tuple(_positive_mass(m) for m in masses)

    def eigenvalue(coords: Coordinates) -> np.ndarray:
        total = 0.0
        for (p, E), m in zip(coords, ms):
            total = total + (p ** 2 - E ** 2) / (2.0 * m)
        return total

    return OperatorSpec(
        OperatorKind.MASS_SHELL, tuple(range(len(ms))), eigenvalue, masses=ms, label="H"
    )


def collapse_mass(i: int, strength: float = 0.0) -> OperatorSpec:
    """p_i^2 - E_i^2 (minus the mass squared of particle i)"""
    return OperatorSpec(
        OperatorKind.COLLAPSE_MASS,
        (i,),
        lambda coords: coords[i][0] ** 2 - coords[i][1] ** 2,
        strength=float(strength),
        label=f"A_mass[{i}]",
    )


def interval_operator(i: int, j: int, strength: float = 0.0) -> OperatorSpec:
    """(x_i - x_j)^2 - (t_i - t_j)^2, the invariant separation of two particles"""
    if i == j:
        raise OperatorError("interval_operator needs two different particles")
    if i < 0 or j < 0:
        raise OperatorError("particle indices must be non-negative")

    def eigenvalue(coords: Coordinates) -> np.ndarray:
        (xi, ti), (xj, tj) = coords[i], coords[j]
        return (xi - xj) ** 2 - (ti - tj) ** 2

    return OperatorSpec(
        OperatorKind.INTERVAL, (i, j), eigenvalue, strength=float(strength), label=f"A_interval[{i},{j}]"
    )


def energy(i: int) -> OperatorSpec:
    return OperatorSpec(OperatorKind.ENERGY, (i,), lambda coords: coords[i][1], label=f"E[{i}]")


def momentum(i: int) -> OperatorSpec:
    return OperatorSpec(OperatorKind.MOMENTUM, (i,), lambda coords: coords[i][0], label=f"p[{i}]")


def time(i: int, strength: float = 0.0) -> OperatorSpec:
    return OperatorSpec(
        OperatorKind.TIME, (i,), lambda coords: coords[i][1], strength=float(strength), label=f"t[{i}]"
    )


def position(i: int, strength: float = 0.0) -> OperatorSpec:
    return OperatorSpec(
        OperatorKind.POSITION, (i,), lambda coords: coords[i][0], strength=float(strength), label=f"x[{i}]"
    )


def with_strength(op: OperatorSpec, strength: float) -> OperatorSpec:
    if not math.isfinite(strength) or strength < 0:
        raise OperatorError(f"collapse strength must be non-negative, got {strength}")
    return replace(op, strength=float(strength))


def three_generator_model(lambda_1: float, lambda_2: float, lambda_3: float) -> list[OperatorSpec]:
    """Two mass generators and the interval generator of a particle pair"""
    return [
        collapse_mass(0, lambda_1),
        collapse_mass(1, lambda_2),
        interval_operator(0, 1, lambda_3),
    ]


def pairwise_interval_generators(
    n_particles: int, strength: float, mass_strength: float | None = None
) -> list[OperatorSpec]:
    """Interval generators for every pair, plus per-particle mass generators if requested"""
    count_constraints(n_particles)
    generators = [
        interval_operator(i, j, strength)
        for i in range(n_particles)
        for j in range(i + 1, n_particles)
    ]
    if mass_strength is not None:
        generators.extend(collapse_mass(i, mass_strength) for i in range(n_particles))
    return generators


class ConstraintCount(NamedTuple):
    pairs: int
    coords: int
    fixes_configuration: bool


def count_constraints(n_particles: int) -> ConstraintCount:
    """Pairwise separations versus relative coordinates for N particles"""
    if n_particles < 2:
        raise OperatorError("counting constraints needs at least two particles")
    pairs = n_particles * (n_particles - 1) // 2
    coords = 2 * (n_particles - 1)
    return ConstraintCount(pairs, coords, pairs >= coords)


@dataclass(frozen=True)
class PoincareParams:
    theta: float = 0.0
    a: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        for name in ("theta", "a", "tau"):
            if not math.isfinite(getattr(self, name)):
                raise OperatorError(f"{name} must be finite")

    @property
    def velocity(self) -> float:
        return math.tanh(self.theta)

    @property
    def gamma(self) -> float:
        return math.cosh(self.theta)


def boost_event(x, t, theta: float):
    """Coordinates of an event in the frame boosted by rapidity theta"""
    ch, sh = math.cosh(theta), math.sinh(theta)
    return x * ch - t * sh, t * ch - x * sh


def boosted_velocity(v: float, theta: float) -> float:
    """Velocity of a packet moving at v, seen from the frame boosted by theta"""
    w = math.tanh(theta)
    return (v - w) / (1.0 - v * w)


def _resample_pair(arr: np.ndarray, axes: tuple[int, int], src: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    moved = np.moveaxis(arr, axes, (-2, -1))
    flat = moved.reshape((-1,) + moved.shape[-2:])
    out = np.empty_like(flat)
    for k in range(flat.shape[0]):
        block = flat[k]
        real = ndimage.map_coordinates(block.real, src, order=3, mode="constant", cval=0.0)
        imag = ndimage.map_coordinates(block.imag, src, order=3, mode="constant", cval=0.0)
        out[k] = real + 1j * imag
    return np.moveaxis(out.reshape(moved.shape), (-2, -1), axes)


def boost_with_quality(psi: WaveFunction, theta: float) -> tuple[WaveFunction, float]:
    """
    Boost by rapidity theta; returns the boosted state and |1 - norm| measured
    before renormalisation.
    """
    if not math.isfinite(theta):
        raise OperatorError("rapidity must be finite")
    if theta == 0.0:
        return psi, 0.0
    state = psi.in_basis(Basis.MOMENTUM_ENERGY)
    ch, sh = math.cosh(theta), math.sinh(theta)
    arr = state.amplitudes
    for i, grid in enumerate(state.grids):
        P, E = np.meshgrid(grid.p_axis, grid.E_axis, indexing="ij")
        # amplitude at (p', E') comes from the inverse rotation of (p', E')
        p_src = P * ch + E * sh
        E_src = E * ch + P * sh
        src = ((p_src - grid.p_axis[0]) / grid.dp, (E_src - grid.E_axis[0]) / grid.dE)
        arr = _resample_pair(arr, (2 * i, 2 * i + 1), src)
    boosted = state.with_amplitudes(arr)
    deviation = abs(1.0 - boosted.norm() / state.norm())
    boosted = boosted.normalized()
    check_support(boosted, bases=(Basis.MOMENTUM_ENERGY, Basis.POSITION_TIME))
    logger.debug(f"Boost theta={theta}: pre-renormalisation norm deviation {deviation:.3e}")
    return boosted.in_basis(psi.basis), deviation


def boost_state(psi: WaveFunction, theta: float) -> WaveFunction:
    return boost_with_quality(psi, theta)[0]


def translate_state(psi: WaveFunction, a: float, tau: float) -> WaveFunction:
    """
    Describe the state in the frame translated by (a, tau): the position-time
    density moves by +a in x and +tau in t. Exact phase on momentum-energy amplitudes.
    """
    if a == 0.0 and tau == 0.0:
        return psi
    state = psi.in_basis(Basis.MOMENTUM_ENERGY)
    phase = 1.0
    for p, E in lattice_coordinates(state.grids, Basis.MOMENTUM_ENERGY):
        phase = phase * np.exp(-1j * (a * p - tau * E))
    moved = state.with_amplitudes(state.amplitudes * phase)
    return moved.in_basis(psi.basis)


def apply_poincare(psi: WaveFunction, params: PoincareParams) -> WaveFunction:
    """Boost, then translate"""
    return translate_state(boost_state(psi, params.theta), params.a, params.tau)
