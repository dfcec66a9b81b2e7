"""
Density-matrix evolution under the averaged collapse dynamics

    d rho / ds = -i [H, rho] - sum_i lambda_i / 2 [A_i, [A_i, rho]]

Operators diagonal in the density matrix's basis are handled elementwise;
`ExplicitOperator` covers generators given as dense Hermitian matrices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import (
    BasisMismatchError,
    DegenerateConfigurationError,
    InsufficientSamplesError,
    NonCommutingGeneratorsError,
    OperatorError,
)
from .grid import Basis, BasisState, DensityMatrix, WaveFunction, lattice_basis
from .operators import OperatorSpec, interval_operator

logger = logging.getLogger("spacetime-collapse.master")

COMMUTATOR_TOL = 1e-10
# largest rate * ds an RK4 step may take; the real-axis stability edge is near 2.785
MAX_RATE_STEP = 1.0
# example cross-checks past this many steps report the closed form alone
MAX_EXAMPLE_STEPS = 200_000


@dataclass(frozen=True, eq=False)
class ExplicitOperator:
    """Dense Hermitian operator on a density matrix's basis"""
    matrix: np.ndarray
    strength: float = 0.0
    label: str = ""

    def __post_init__(self):
        arr = np.array(self.matrix, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise OperatorError(f"explicit operator must be square, got shape {arr.shape}")
        if np.max(np.abs(arr - arr.conj().T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(arr))):
            raise OperatorError("explicit operator is not Hermitian")
        arr.flags.writeable = False
        object.__setattr__(self, "matrix", arr)

    @property
    def name(self) -> str:
        return self.label or "explicit"


Operator = Union[OperatorSpec, ExplicitOperator]


def _resolve(op: Operator, rho: DensityMatrix) -> tuple[np.ndarray | None, np.ndarray | None]:
    """(eigenvalue vector, None) for diagonal operators, (None, matrix) for dense ones"""
    if isinstance(op, ExplicitOperator):
        if op.matrix.shape[0] != rho.dim:
            raise BasisMismatchError(f"{op.name} has dimension {op.matrix.shape[0]}, density matrix {rho.dim}")
        if np.count_nonzero(op.matrix - np.diag(np.diag(op.matrix))) == 0:
            return np.diag(op.matrix).real.copy(), None
        return None, op.matrix
    return op.evaluate_on(rho), None


def _rhs(rho: np.ndarray, H, terms) -> np.ndarray:
    h_diag, h_dense = H
    if h_diag is not None:
        drho = -1j * (h_diag[:, None] - h_diag[None, :]) * rho
    elif h_dense is not None:
        drho = -1j * (h_dense @ rho - rho @ h_dense)
    else:
        drho = np.zeros_like(rho)
    for strength, diag, dense in terms:
        if diag is not None:
            drho -= 0.5 * strength * (diag[:, None] - diag[None, :]) ** 2 * rho
        else:
            a_rho = dense @ rho
            drho -= 0.5 * strength * (dense @ a_rho - 2.0 * a_rho @ dense + rho @ dense @ dense)
    return drho


def _prepare(rho: DensityMatrix, H: Operator | None, generators: Sequence[Operator]):
    resolved_H = (None, None) if H is None else _resolve(H, rho)
    terms = []
    for g in generators:
        diag, dense = _resolve(g, rho)
        if g.strength > 0:
            terms.append((g.strength, diag, dense))
    return resolved_H, terms


def _spread(diag: np.ndarray | None, dense: np.ndarray | None, support: np.ndarray) -> float:
    if diag is not None:
        values = diag[support]
        return float(np.ptp(values)) if values.size else 0.0
    if dense is not None:
        eig = np.linalg.eigvalsh(dense)
        return float(eig[-1] - eig[0])
    return 0.0


def max_rate(rho: DensityMatrix, H: Operator | None, generators: Sequence[Operator]) -> float:
    """
    Bound on the fastest mode of the master equation started from rho.

    Each generator contributes lambda / 2 times its squared eigenvalue spread,
    the Hamiltonian its eigenvalue spread. Diagonal dynamics never leave the
    populated basis states, so spreads are taken over those alone unless a
    dense operator is present.
    """
    resolved_H, terms = _prepare(rho, H, generators)
    support = np.abs(rho.diagonal()) > 0.0
    if resolved_H[1] is not None or any(dense is not None for _, _, dense in terms):
        support = np.ones(rho.dim, dtype=bool)
    rate = _spread(*resolved_H, support)
    for strength, diag, dense in terms:
        rate += 0.5 * strength * _spread(diag, dense, support) ** 2
    return rate


def stable_steps(rate: float, S: float, minimum: int = 1) -> int:
    """Fewest RK4 steps over S keeping rate * ds within MAX_RATE_STEP"""
    if S <= 0:
        return 0
    return max(int(minimum), math.ceil(S * rate / MAX_RATE_STEP))


def _rk4(rho: np.ndarray, ds: float, H, terms) -> np.ndarray:
    k1 = _rhs(rho, H, terms)
    k2 = _rhs(rho + 0.5 * ds * k1, H, terms)
    k3 = _rhs(rho + 0.5 * ds * k2, H, terms)
    k4 = _rhs(rho + ds * k3, H, terms)
    rho = rho + (ds / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (rho + rho.conj().T)


def master_step(
    rho: DensityMatrix, H: Operator | None, generators: Sequence[Operator], ds: float
) -> DensityMatrix:
    """One fourth-order Runge-Kutta step of the master equation"""
    if ds == 0.0:
        return rho
    resolved_H, terms = _prepare(rho, H, generators)
    return rho.with_elements(_rk4(np.array(rho.elements), ds, resolved_H, terms))


@dataclass
class MasterEvolution:
    final: DensityMatrix
    s_values: np.ndarray
    elements: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    min_eigenvalues: np.ndarray | None = None


def evolve_master(
    rho0: DensityMatrix,
    H: Operator | None,
    generators: Sequence[Operator],
    ds: float,
    n_steps: int,
    track: Sequence[tuple[int, int]] = (),
    check_positivity: bool = False,
) -> MasterEvolution:
    """Iterate master_step, recording the tracked matrix elements after every step"""
    resolved_H, terms = _prepare(rho0, H, generators)
    rho = np.array(rho0.elements)
    series = {pair: [rho[pair]] for pair in track}
    eigs = [rho0.min_eigenvalue()] if check_positivity else None
    for _ in range(n_steps):
        rho = _rk4(rho, ds, resolved_H, terms)
        for pair in track:
            series[pair].append(rho[pair])
        if eigs is not None:
            eigs.append(float(np.linalg.eigvalsh(rho)[0]))
    return MasterEvolution(
        final=rho0.with_elements(rho),
        s_values=ds * np.arange(n_steps + 1),
        elements={pair: np.array(values) for pair, values in series.items()},
        min_eigenvalues=None if eigs is None else np.array(eigs),
    )


def _commutes(a: np.ndarray, b: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(a))) * float(np.max(np.abs(b))))
    return float(np.max(np.abs(a @ b - b @ a), initial=0.0)) <= COMMUTATOR_TOL * scale


def decay_solution(
    rho0: DensityMatrix,
    generators: Sequence[Operator],
    delta_s: float,
    H: Operator | None = None,
) -> DensityMatrix:
    """
    Closed-form solution for mutually commuting generators (and H commuting with them):
    each element in the joint eigenbasis is multiplied by
        exp(-delta_s sum_i lambda_i/2 (a_i - a_j)^2) * exp(-i delta_s (h_i - h_j)).
    """
    if delta_s == 0.0:
        return rho0
    resolved = [(g.strength, *_resolve(g, rho0)) for g in generators]
    h_diag, h_dense = (None, None) if H is None else _resolve(H, rho0)

    if h_dense is None and all(dense is None for _, _, dense in resolved):
        rate = np.zeros((rho0.dim, rho0.dim))
        for strength, diag, _ in resolved:
            rate += 0.5 * strength * (diag[:, None] - diag[None, :]) ** 2
        factor = np.exp(-delta_s * rate)
        if h_diag is not None:
            factor = factor * np.exp(-1j * delta_s * (h_diag[:, None] - h_diag[None, :]))
        return rho0.with_elements(rho0.elements * factor)

    matrices = [np.diag(d).astype(complex) if m is None else m for _, d, m in resolved]
    if H is not None:
        matrices.append(np.diag(h_diag).astype(complex) if h_dense is None else h_dense)
    for i in range(len(matrices)):
        for j in range(i + 1, len(matrices)):
            if not _commutes(matrices[i], matrices[j]):
                raise NonCommutingGeneratorsError(
                    "decay_solution needs mutually commuting generators (and H commuting with them)"
                )
    # a generic real combination separates every joint eigenspace
    weights = np.random.default_rng(0).uniform(0.5, 1.5, len(matrices))
    _, U = np.linalg.eigh(sum(w * m for w, m in zip(weights, matrices)))
    eig = [np.real(np.einsum("ki,kl,li->i", U.conj(), m, U)) for m in matrices]

    rate = np.zeros((rho0.dim, rho0.dim))
    for (strength, _, _), a in zip(resolved, eig):
        rate += 0.5 * strength * (a[:, None] - a[None, :]) ** 2
    factor = np.exp(-delta_s * rate).astype(complex)
    if H is not None:
        h = eig[-1]
        factor *= np.exp(-1j * delta_s * (h[:, None] - h[None, :]))
    rotated = U.conj().T @ rho0.elements @ U
    return rho0.with_elements(U @ (rotated * factor) @ U.conj().T)


@dataclass
class EnsembleDensity:
    density: DensityMatrix
    stderr: np.ndarray
    samples: int


def ensemble_density(states: Iterable[WaveFunction], basis: Basis | None = None) -> EnsembleDensity:
    """E[|psi><psi|] over trajectory states, with elementwise Monte Carlo standard errors"""
    total = None
    total_sq = None
    labels: tuple[BasisState, ...] = ()
    count = 0
    for psi in states:
        state = psi.in_basis(basis or psi.basis)
        v = state.amplitudes.reshape(-1) * math.sqrt(state.cell_volume)
        v = v / np.linalg.norm(v)
        outer = np.outer(v, v.conj())
        if total is None:
            labels = lattice_basis(state.grids, state.basis)
            total = np.zeros_like(outer)
            total_sq = np.zeros(outer.shape)
        total += outer
        total_sq += np.abs(outer) ** 2
        count += 1
    if count < 2:
        raise InsufficientSamplesError("ensemble_density needs at least two states")
    mean = total / count
    var = np.maximum(total_sq / count - np.abs(mean) ** 2, 0.0) * count / (count - 1)
    return EnsembleDensity(DensityMatrix(labels, mean), np.sqrt(var / count), count)


@dataclass
class ExampleReport:
    name: str
    basis: list[str]
    eigenvalues: list[float]
    S: float
    strength: float
    diagonal: list[float]
    off_diagonal: complex
    expected_factor: float
    iterated_deviation: float | None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["off_diagonal"] = {"re": self.off_diagonal.real, "im": self.off_diagonal.imag}
        out["off_diagonal_magnitude"] = abs(self.off_diagonal)
        return out


def _two_particle_state(x1: float, x2: float) -> BasisState:
    return BasisState(Basis.POSITION_TIME, ((x1, 0.0), (x2, 0.0)))


def _run_example(
    name: str,
    labels: tuple[BasisState, ...],
    branches: tuple[int, int],
    S: float,
    strength: float,
    n_steps: int,
) -> ExampleReport:
    if S < 0 or strength < 0:
        raise OperatorError("S and the collapse strength must be non-negative")
    vector = np.zeros(len(labels))
    vector[list(branches)] = 1.0
    rho0 = DensityMatrix.pure(vector, labels)
    generator = interval_operator(0, 1, strength)
    closed = decay_solution(rho0, [generator], S)
    eig = generator.evaluate_on(rho0)
    deviation: float | None = 0.0
    if S > 0 and n_steps > 0:
        steps = stable_steps(max_rate(rho0, None, [generator]), S, n_steps)
        if steps > MAX_EXAMPLE_STEPS:
            logger.info(f"{name}: {steps} RK4 steps needed for S = {S:g}, reporting the closed form only")
            deviation = None
        else:
            iterated = evolve_master(rho0, None, [generator], S / steps, steps).final
            deviation = float(np.max(np.abs(iterated.elements - closed.elements)))
    i, j = branches
    gap = eig[i] - eig[j]
    return ExampleReport(
        name=name,
        basis=[label.describe() for label in labels],
        eigenvalues=[float(eig[i]), float(eig[j])],
        S=S,
        strength=strength,
        diagonal=[float(closed.elements[i, i].real), float(closed.elements[j, j].real)],
        off_diagonal=complex(closed.elements[i, j]),
        expected_factor=math.exp(-S * strength / 2 * gap ** 2),
        iterated_deviation=deviation,
    )


def example_no_collapse(
    L: float = -1.0, R: float = 1.0, S: float = 10.0, strength: float = 1.0, n_steps: int = 1000
) -> ExampleReport:
    """Both particles together at L or together at R: equal separations, no collapse"""
    labels = tuple(_two_particle_state(a, b) for a in (L, R) for b in (L, R))
    report = _run_example("no-collapse", labels, (0, 3), S, strength, n_steps)
    logger.info(f"No-collapse example: off-diagonal {abs(report.off_diagonal):.6g}")
    return report


def example_collapse(
    L: float, C: float, R: float, S: float, strength: float, n_steps: int = 1000
) -> ExampleReport:
    """Particle 1 at L or R with particle 2 at C: distinct separations collapse"""
    if math.isclose(abs(L - C), abs(R - C), rel_tol=0.0, abs_tol=1e-12):
        raise DegenerateConfigurationError(
            f"|L-C| = |R-C| = {abs(L - C):g}: both branches have the same separation, "
            "so the interval generator cannot distinguish them"
        )
    labels = (_two_particle_state(L, C), _two_particle_state(R, C))
    report = _run_example("collapse", labels, (0, 1), S, strength, n_steps)
    logger.info(
        f"Collapse example: off-diagonal {abs(report.off_diagonal):.6g}, expected {0.5 * report.expected_factor:.6g}"
    )
    return report
