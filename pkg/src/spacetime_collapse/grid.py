"""
Discretised single- and multi-particle Hilbert space.

Every particle carries a position axis and a time axis. The position-time lattice
and the momentum-energy lattice are Fourier duals: dx*dp*n_x = 2*pi and
dt*dE*n_t = 2*pi. Amplitudes are stored as densities, so that
sum(|amplitude|^2) * cell_volume is the squared norm in either basis.

Sign convention: the position-time amplitude is
    psi(x, t) = (1/2pi) * integral dp dE exp(+i p x - i E t) phi(p, E)
so the energy operator acts as +i d/dt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np
from scipy import fft as sp_fft

from .errors import BasisMismatchError, GridError, LatticeOverflowError

if TYPE_CHECKING:
    from .operators import OperatorSpec

logger = logging.getLogger("spacetime-collapse.grid")

# wrap-around monitor defaults
EDGE_CELLS = 2
EDGE_THRESHOLD = 1e-6

MAX_DENSITY_DIM = 4096


class Basis(str, Enum):
    """Which lattice an amplitude array currently lives on"""
    POSITION_TIME = "position-time"
    MOMENTUM_ENERGY = "momentum-energy"

    @property
    def dual(self) -> "Basis":
        if self is Basis.POSITION_TIME:
            return Basis.MOMENTUM_ENERGY
        return Basis.POSITION_TIME


def _is_lattice_size(n: Any) -> bool:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        return False
    return n >= 4 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Per-particle lattice over (x, t) and its dual (p, E)"""
    n_x: int
    n_t: int
    dx: float
    dt_lat: float
    centre_x: float = 0.0
    centre_t: float = 0.0
    centre_p: float = 0.0
    centre_E: float = 0.0

    def __post_init__(self):
        if not _is_lattice_size(self.n_x) or not _is_lattice_size(self.n_t):
            raise GridError(
                f"lattice sizes must be powers of two >= 4, got n_x={self.n_x}, n_t={self.n_t}"
            )
        for name in ("dx", "dt_lat"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise GridError(f"{name} must be a positive finite spacing, got {value}")
        for name in ("centre_x", "centre_t", "centre_p", "centre_E"):
            if not math.isfinite(getattr(self, name)):
                raise GridError(f"{name} must be finite")

    @property
    def dp(self) -> float:
        return 2.0 * math.pi / (self.n_x * self.dx)

    @property
    def dE(self) -> float:
        return 2.0 * math.pi / (self.n_t * self.dt_lat)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_t)

    @property
    def x_axis(self) -> np.ndarray:
        return self.centre_x + (np.arange(self.n_x) - self.n_x // 2) * self.dx

    @property
    def t_axis(self) -> np.ndarray:
        return self.centre_t + (np.arange(self.n_t) - self.n_t // 2) * self.dt_lat

    @property
    def p_axis(self) -> np.ndarray:
        return self.centre_p + (np.arange(self.n_x) - self.n_x // 2) * self.dp

    @property
    def E_axis(self) -> np.ndarray:
        return self.centre_E + (np.arange(self.n_t) - self.n_t // 2) * self.dE

    def axes(self, basis: Basis) -> tuple[np.ndarray, np.ndarray]:
        if basis is Basis.POSITION_TIME:
            return self.x_axis, self.t_axis
        return self.p_axis, self.E_axis

    def spacings(self, basis: Basis) -> tuple[float, float]:
        if basis is Basis.POSITION_TIME:
            return self.dx, self.dt_lat
        return self.dp, self.dE

    def cell_volume(self, basis: Basis) -> float:
        first, second = self.spacings(basis)
        return first * second

    def index_of(self, value: float, axis: int, basis: Basis = Basis.POSITION_TIME) -> int:
        """Nearest lattice index to a coordinate value on axis 0 (x/p) or 1 (t/E)"""
        coords = self.axes(basis)[axis]
        step = self.spacings(basis)[axis]
        index = int(round((value - coords[0]) / step))
        if index < 0 or index >= coords.size:
            raise GridError(f"coordinate {value} lies outside the lattice axis {axis} ({basis.value})")
        return index

    def to_dict(self) -> dict[str, float | int]:
        return {
            "n_x": self.n_x,
            "n_t": self.n_t,
            "dx": self.dx,
            "dt_lat": self.dt_lat,
            "centre_x": self.centre_x,
            "centre_t": self.centre_t,
            "centre_p": self.centre_p,
            "centre_E": self.centre_E,
        }


def make_grid(
    n_x: int,
    n_t: int,
    dx: float,
    dt_lat: float,
    centre_x: float = 0.0,
    centre_t: float = 0.0,
    centre_p: float = 0.0,
    centre_E: float = 0.0,
) -> GridSpec:
    """Build a lattice with exact dual spacings dp = 2pi/(n_x dx), dE = 2pi/(n_t dt)"""
    return GridSpec(n_x, n_t, float(dx), float(dt_lat), centre_x, centre_t, centre_p, centre_E)


def _along(vector: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vector.size
    return vector.reshape(shape)


def _to_position_axis(arr: np.ndarray, axis: int, grid: GridSpec, kind: str) -> np.ndarray:
    # kernel exp(+i p x) on spatial axes, exp(-i E t) on time axes
    if kind == "x":
        sign, n = 1.0, grid.n_x
        q_start, dq = grid.p_axis[0], grid.dp
        y_start, dy = grid.x_axis[0], grid.dx
    else:
        sign, n = -1.0, grid.n_t
        q_start, dq = grid.E_axis[0], grid.dE
        y_start, dy = grid.t_axis[0], grid.dt_lat
    ndim = arr.ndim
    j = np.arange(n)
    pre = np.exp(1j * sign * j * dq * y_start)
    post = np.exp(1j * sign * (q_start * y_start + q_start * j * dy))
    b = arr * _along(pre, axis, ndim)
    if sign > 0:
        summed = sp_fft.ifft(b, axis=axis) * n
    else:
        summed = sp_fft.fft(b, axis=axis)
    return summed * _along(post, axis, ndim) * (dq / math.sqrt(2.0 * math.pi))


def _to_momentum_axis(arr: np.ndarray, axis: int, grid: GridSpec, kind: str) -> np.ndarray:
    if kind == "x":
        sign, n = 1.0, grid.n_x
        q_start, dq = grid.p_axis[0], grid.dp
        y_start, dy = grid.x_axis[0], grid.dx
    else:
        sign, n = -1.0, grid.n_t
        q_start, dq = grid.E_axis[0], grid.dE
        y_start, dy = grid.t_axis[0], grid.dt_lat
    ndim = arr.ndim
    k = np.arange(n)
    pre = np.exp(-1j * sign * q_start * k * dy)
    post = np.exp(-1j * sign * (q_start * y_start + k * dq * y_start))
    b = arr * _along(pre, axis, ndim)
    if sign > 0:
        summed = sp_fft.fft(b, axis=axis)
    else:
        summed = sp_fft.ifft(b, axis=axis) * n
    return summed * _along(post, axis, ndim) * (dy / math.sqrt(2.0 * math.pi))


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """
    Amplitudes over the joint per-particle lattice.

    Axis 2*i is particle i's x (or p) axis and axis 2*i + 1 its t (or E) axis.
    Instances are immutable; every operation returns a new value.
    """
    grids: tuple[GridSpec, ...]
    amplitudes: np.ndarray
    basis: Basis

    def __post_init__(self):
        grids = tuple(self.grids)
        if not grids:
            raise GridError("a wave function needs at least one particle")
        expected = tuple(n for g in grids for n in g.shape)
        arr = np.array(self.amplitudes, dtype=np.complex128)
        if arr.shape != expected:
            raise GridError(f"amplitude shape {arr.shape} does not match lattice shape {expected}")
        arr.flags.writeable = False
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "amplitudes", arr)
        object.__setattr__(self, "basis", Basis(self.basis))

    @property
    def n_particles(self) -> int:
        return len(self.grids)

    @property
    def cell_volume(self) -> float:
        return math.prod(g.cell_volume(self.basis) for g in self.grids)

    def norm_squared(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.cell_volume)

    def norm(self) -> float:
        return math.sqrt(self.norm_squared())

    def normalized(self) -> "WaveFunction":
        norm = self.norm()
        if norm == 0.0:
            raise GridError("cannot normalise the zero state")
        return self.with_amplitudes(self.amplitudes / norm)

    def with_amplitudes(self, amplitudes: np.ndarray, basis: Basis | None = None) -> "WaveFunction":
        return WaveFunction(self.grids, amplitudes, basis or self.basis)

    def density(self) -> np.ndarray:
        """|amplitude|^2 in the current basis (a probability density)"""
        return np.abs(self.amplitudes) ** 2

    def to_momentum_energy(self) -> "WaveFunction":
        if self.basis is not Basis.POSITION_TIME:
            raise BasisMismatchError("to_momentum_energy expects a position-time state")
        arr = self.amplitudes
        for i, grid in enumerate(self.grids):
            arr = _to_momentum_axis(arr, 2 * i, grid, "x")
            arr = _to_momentum_axis(arr, 2 * i + 1, grid, "t")
        return WaveFunction(self.grids, arr, Basis.MOMENTUM_ENERGY)

    def to_position_time(self) -> "WaveFunction":
        if self.basis is not Basis.MOMENTUM_ENERGY:
            raise BasisMismatchError("to_position_time expects a momentum-energy state")
        arr = self.amplitudes
        for i, grid in enumerate(self.grids):
            arr = _to_position_axis(arr, 2 * i, grid, "x")
            arr = _to_position_axis(arr, 2 * i + 1, grid, "t")
        return WaveFunction(self.grids, arr, Basis.POSITION_TIME)

    def in_basis(self, basis: Basis) -> "WaveFunction":
        if basis is self.basis:
            return self
        if basis is Basis.MOMENTUM_ENERGY:
            return self.to_momentum_energy()
        return self.to_position_time()


def to_momentum_energy(psi: WaveFunction) -> WaveFunction:
    return psi.to_momentum_energy()


def to_position_time(psi: WaveFunction) -> WaveFunction:
    return psi.to_position_time()


def lattice_coordinates(
    grids: Sequence[GridSpec], basis: Basis
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-particle coordinate arrays, broadcastable against the full amplitude shape"""
    ndim = 2 * len(grids)
    coords = []
    for i, grid in enumerate(grids):
        first, second = grid.axes(basis)
        coords.append((_along(first, 2 * i, ndim), _along(second, 2 * i + 1, ndim)))
    return coords


def _check_same_grids(a: WaveFunction, b: WaveFunction) -> None:
    if a.grids != b.grids:
        raise GridError("states live on different lattices")


def inner(psi1: WaveFunction, psi2: WaveFunction) -> complex:
    """<psi1|psi2>"""
    _check_same_grids(psi1, psi2)
    other = psi2.in_basis(psi1.basis)
    return complex(np.vdot(psi1.amplitudes, other.amplitudes) * psi1.cell_volume)


def _diagonal_weights(psi: WaveFunction, op: "OperatorSpec") -> tuple[np.ndarray, np.ndarray]:
    state = psi.in_basis(op.diagonal_basis)
    weights = state.density()
    total = weights.sum()
    if total == 0.0:
        raise GridError("expectation of the zero state")
    return weights / total, op.evaluate(psi.grids)


def moments(psi: WaveFunction, op: "OperatorSpec") -> tuple[float, float]:
    """Mean and variance of a basis-diagonal operator"""
    weights, eig = _diagonal_weights(psi, op)
    mean = float(np.sum(weights * eig))
    var = float(np.sum(weights * (eig - mean) ** 2))
    return mean, max(var, 0.0)


def expectation(psi: WaveFunction, op: "OperatorSpec") -> float:
    return moments(psi, op)[0]


def variance(psi: WaveFunction, op: "OperatorSpec") -> float:
    return moments(psi, op)[1]


def apply_operator(psi: WaveFunction, op: "OperatorSpec") -> WaveFunction:
    """O|psi>, unnormalised, returned in the operator's diagonal basis"""
    state = psi.in_basis(op.diagonal_basis)
    return state.with_amplitudes(state.amplitudes * op.evaluate(psi.grids))


def edge_probability(psi: WaveFunction, cells: int = EDGE_CELLS) -> float:
    """Probability within `cells` lattice cells of any edge, in the current basis"""
    weights = psi.density()
    total = weights.sum()
    if total == 0.0:
        return 0.0
    interior = weights[tuple(slice(cells, -cells) for _ in range(weights.ndim))]
    return float((total - interior.sum()) / total)


def check_support(
    psi: WaveFunction,
    bases: Sequence[Basis] | None = None,
    threshold: float = EDGE_THRESHOLD,
    strict: bool = True,
) -> float:
    """Wrap-around monitor; returns the largest edge probability found"""
    worst = 0.0
    for basis in bases or (psi.basis,):
        edge = edge_probability(psi.in_basis(basis))
        worst = max(worst, edge)
        if edge > threshold:
            message = f"{edge:.3e} probability within {EDGE_CELLS} cells of the {basis.value} lattice edge"
            if strict:
                raise LatticeOverflowError(message, edge)
            logger.warning(f"Wrap-around monitor: {message}")
    return worst


def delta_state(grids: Sequence[GridSpec], points: Sequence[tuple[float, float]]) -> WaveFunction:
    """Lattice-localised position-time state with one (x, t) point per particle"""
    return superposition_state(grids, [points], [1.0])


def superposition_state(
    grids: Sequence[GridSpec],
    branches: Sequence[Sequence[tuple[float, float]]],
    amplitudes: Sequence[complex],
) -> WaveFunction:
    """Superposition of lattice delta states; each branch lists one (x, t) per particle"""
    grids = tuple(grids)
    if len(branches) != len(amplitudes):
        raise GridError("one amplitude is needed per branch")
    arr = np.zeros(tuple(n for g in grids for n in g.shape), dtype=np.complex128)
    for branch, amplitude in zip(branches, amplitudes):
        if len(branch) != len(grids):
            raise GridError("each branch needs one (x, t) point per particle")
        index = []
        for grid, (x, t) in zip(grids, branch):
            index.extend([grid.index_of(x, 0), grid.index_of(t, 1)])
        arr[tuple(index)] += amplitude
    psi = WaveFunction(grids, arr, Basis.POSITION_TIME)
    return psi.normalized()


@dataclass(frozen=True)
class BasisState:
    """Descriptor of one basis vector: per-particle (x, t) or (p, E) values"""
    basis: Basis
    coordinates: tuple[tuple[float, float], ...]
    label: str = ""

    def describe(self) -> str:
        if self.label:
            return self.label
        return ";".join(f"({a:g},{b:g})" for a, b in self.coordinates)


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive matrix over a small explicit basis"""
    basis_labels: tuple[BasisState, ...]
    elements: np.ndarray

    hermitian_tol = 1e-12
    trace_tol = 1e-10
    positivity_tol = -1e-10

    def __post_init__(self):
        labels = tuple(self.basis_labels)
        arr = np.array(self.elements, dtype=np.complex128)
        dim = len(labels)
        if arr.shape != (dim, dim):
            raise GridError(f"density matrix shape {arr.shape} does not match {dim} basis labels")
        if dim > MAX_DENSITY_DIM:
            raise GridError(f"basis dimension {dim} exceeds {MAX_DENSITY_DIM}")
        if len({label.basis for label in labels}) > 1:
            raise BasisMismatchError("basis labels mix position-time and momentum-energy states")
        scale = max(1.0, float(np.max(np.abs(arr)))) if dim else 1.0
        if np.max(np.abs(arr - arr.conj().T), initial=0.0) > self.hermitian_tol * scale:
            raise GridError("density matrix is not Hermitian")
        trace = np.trace(arr).real
        if abs(trace - 1.0) > self.trace_tol:
            raise GridError(f"density matrix trace {trace!r} differs from 1")
        arr.flags.writeable = False
        object.__setattr__(self, "basis_labels", labels)
        object.__setattr__(self, "elements", arr)
        if dim <= 256 and self.min_eigenvalue() < self.positivity_tol:
            raise GridError("density matrix is not positive semidefinite")

    @property
    def dim(self) -> int:
        return len(self.basis_labels)

    @property
    def basis(self) -> Basis:
        return self.basis_labels[0].basis

    @property
    def n_particles(self) -> int:
        return len(self.basis_labels[0].coordinates)

    def coordinate_arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-particle coordinate vectors over the basis, for diagonal operators"""
        coords = np.array([label.coordinates for label in self.basis_labels], dtype=float)
        return [(coords[:, i, 0], coords[:, i, 1]) for i in range(self.n_particles)]

    def diagonal(self) -> np.ndarray:
        return np.diag(self.elements).real.copy()

    def element(self, i: int, j: int) -> complex:
        return complex(self.elements[i, j])

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.elements)[0])

    def with_elements(self, elements: np.ndarray) -> "DensityMatrix":
        return DensityMatrix(self.basis_labels, elements)

    @classmethod
    def pure(cls, vector: Sequence[complex], labels: Sequence[BasisState]) -> "DensityMatrix":
        v = np.asarray(vector, dtype=np.complex128)
        v = v / np.linalg.norm(v)
        return cls(tuple(labels), np.outer(v, v.conj()))

    @classmethod
    def from_state(cls, psi: WaveFunction, basis: Basis | None = None) -> "DensityMatrix":
        """|psi><psi| over every lattice point of the chosen basis"""
        state = psi.in_basis(basis or psi.basis)
        labels = lattice_basis(state.grids, state.basis)
        vector = state.amplitudes.reshape(-1) * math.sqrt(state.cell_volume)
        return cls.pure(vector, labels)


def lattice_basis(grids: Sequence[GridSpec], basis: Basis) -> tuple[BasisState, ...]:
    """Basis descriptors for every lattice point, in C order of the amplitude array"""
    axes = []
    for grid in grids:
        axes.extend(grid.axes(basis))
    size = math.prod(a.size for a in axes)
    if size > MAX_DENSITY_DIM:
        raise GridError(f"lattice has {size} points, more than the {MAX_DENSITY_DIM} a density matrix allows")
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = [m.reshape(-1) for m in mesh]
    labels = []
    for k in range(size):
        coords = tuple((float(flat[2 * i][k]), float(flat[2 * i + 1][k])) for i in range(len(grids)))
        labels.append(BasisState(basis, coords))
    return tuple(labels)
