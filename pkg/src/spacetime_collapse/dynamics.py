"""
Parameter-s evolution: exact free phase and the normalised collapse SDE.

A stochastic step applies, in order, the Hamiltonian phase and the collapse
factor of every momentum-energy-diagonal generator, then the collapse factor of
every position-time-diagonal generator, and renormalises:

    psi -> (1 + sum_i [(A_i - <A_i>) dB_i - lambda_i/2 (A_i - <A_i>)^2 ds]) psi

Expectations are taken once, at the start of the step.

Step control rejects a step when lambda_i * Var(A_i) * ds or |<H>| * ds
exceeds STEP_BOUND. Var(A) rather than Var(A)^2 keeps the bound
dimensionless: lambda carries units of [A]^-2 [s]^-1, so lambda * Var * ds is
a pure number while lambda * Var^2 * ds would still carry [A]^2. Rejected
steps are halved with a Brownian bridge up to MAX_HALVINGS times.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import BasisMismatchError, IntegrationError, StepControlError
from .grid import Basis, WaveFunction, apply_operator, inner, moments
from .operators import OperatorSpec, energy, momentum, position, time

logger = logging.getLogger("spacetime-collapse.dynamics")

# dimensionless per-step bound on lambda * Var(A) * ds and |<H>| * ds
STEP_BOUND = 0.1
MAX_HALVINGS = 8
COLLAPSE_VARIANCE_FRACTION = 1e-3

Observer = Callable[[float, WaveFunction], None]


@dataclass(frozen=True)
class NoisePath:
    """
    Reproducible Brownian increments for one trajectory.

    The stream for trajectory k is a Philox generator keyed by
    SeedSequence([seed, k, 0]); increments are sqrt(lambda_i * ds) times
    standard normals. With `antithetic`, odd trajectories replay the stream
    of the preceding even one with the sign flipped.
    """
    seed: int
    ds: float
    strengths: tuple[float, ...]
    trajectory: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if isinstance(self.seed, bool) or not 0 <= int(self.seed) < 2 ** 64:
            raise IntegrationError(f"seed must be a 64-bit non-negative integer, got {self.seed}")
        if not math.isfinite(self.ds) or self.ds <= 0:
            raise IntegrationError(f"ds must be positive, got {self.ds}")
        strengths = tuple(float(x) for x in self.strengths)
        if any(not math.isfinite(x) or x < 0 for x in strengths):
            raise IntegrationError("collapse strengths must be finite and non-negative")
        if self.trajectory < 0:
            raise IntegrationError("trajectory index must be non-negative")
        object.__setattr__(self, "strengths", strengths)

    @property
    def stream_index(self) -> int:
        if self.antithetic:
            return self.trajectory - self.trajectory % 2
        return self.trajectory

    @property
    def sign(self) -> float:
        return -1.0 if self.antithetic and self.trajectory % 2 else 1.0

    def _generator(self, stream: int) -> np.random.Generator:
        entropy = [int(self.seed), self.stream_index, stream]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def increments(self, n_steps: int) -> np.ndarray:
        """Array of shape (n_steps, n_generators)"""
        z = self._generator(0).standard_normal((n_steps, len(self.strengths)))
        return self.sign * z * np.sqrt(np.asarray(self.strengths) * self.ds)

    def bridge(self) -> "BrownianBridge":
        return BrownianBridge(self._generator(1), np.asarray(self.strengths), self.sign)


class BrownianBridge:
    """Splits an increment over ds into two half-step increments with the same sum"""

    def __init__(self, rng: np.random.Generator, strengths: np.ndarray, sign: float = 1.0):
        self._rng = rng
        self._strengths = strengths
        self._sign = sign

    def split(self, dB: np.ndarray, ds: float) -> tuple[np.ndarray, np.ndarray]:
        z = self._rng.standard_normal(len(self._strengths))
        first = 0.5 * dB + self._sign * z * np.sqrt(self._strengths * ds / 4.0)
        return first, dB - first


class StepResult(NamedTuple):
    state: WaveFunction
    means: tuple[float, ...]
    variances: tuple[float, ...]
    norm_defect: float
    norm_residual: float


@dataclass(frozen=True)
class Outcome:
    collapsed: bool
    index: int
    value: float
    mean: float
    variance: float


def classify_outcome(
    mean: float, var: float, eigenvalues: Sequence[float], gap: float | None = None
) -> Outcome:
    """
    Collapsed when Var < 1e-3 * gap^2; the outcome is the eigenvalue nearest the
    mean. `gap` defaults to the smallest spacing between the eigenvalues.
    """
    levels = np.asarray(eigenvalues, dtype=float)
    if levels.size == 0:
        raise ValueError("classify_outcome needs at least one eigenvalue")
    if gap is None:
        ordered = np.unique(levels)
        gap = float(np.min(np.diff(ordered))) if ordered.size > 1 else 1.0
    index = int(np.argmin(np.abs(levels - mean)))
    collapsed = var < COLLAPSE_VARIANCE_FRACTION * gap ** 2
    return Outcome(bool(collapsed), index, float(levels[index]), float(mean), float(var))


def _require_momentum_diagonal(H: OperatorSpec) -> None:
    if H.diagonal_basis is not Basis.MOMENTUM_ENERGY:
        raise BasisMismatchError(f"{H.name} must be diagonal in the momentum-energy basis")


def step_deterministic(psi: WaveFunction, H: OperatorSpec | None, ds: float) -> WaveFunction:
    """Exact free step: phase exp(-i h ds) on the momentum-energy amplitudes"""
    if H is None or ds == 0.0:
        return psi
    _require_momentum_diagonal(H)
    state = psi.in_basis(Basis.MOMENTUM_ENERGY)
    phase = np.exp(-1j * H.evaluate(psi.grids) * ds)
    return state.with_amplitudes(state.amplitudes * phase).in_basis(psi.basis)


def _collapse_factor(
    generators: Sequence[OperatorSpec],
    means: Sequence[float],
    dB: np.ndarray,
    ds: float,
    psi: WaveFunction,
    basis: Basis,
):
    factor = 1.0
    for g, mean, db in zip(generators, means, dB):
        if g.diagonal_basis is not basis:
            continue
        delta = g.evaluate(psi.grids) - mean
        factor = factor + delta * db - 0.5 * g.strength * delta ** 2 * ds
    return factor


def check_step(
    psi: WaveFunction,
    H: OperatorSpec | None,
    generators: Sequence[OperatorSpec],
    ds: float,
    variances: Sequence[float],
) -> None:
    """Raises StepControlError when the step would leave the perturbative regime"""
    worst = max((g.strength * v * ds for g, v in zip(generators, variances)), default=0.0)
    if H is not None and any(g.strength > 0 for g in generators):
        worst = max(worst, abs(moments(psi, H)[0]) * ds)
    if worst > STEP_BOUND:
        halvings = math.ceil(math.log2(worst / STEP_BOUND))
        raise StepControlError(
            f"step ds={ds:.6g} has control product {worst:.3g} > {STEP_BOUND}",
            ds=ds,
            suggested_ds=ds / 2 ** halvings,
        )


def step_sde_with_diagnostics(
    psi: WaveFunction,
    H: OperatorSpec | None,
    generators: Sequence[OperatorSpec],
    dB: Sequence[float],
    ds: float,
) -> StepResult:
    dB = np.asarray(dB, dtype=float).reshape(-1)
    if dB.size != len(generators):
        raise IntegrationError(f"{dB.size} noise increments for {len(generators)} generators")
    if H is not None:
        _require_momentum_diagonal(H)

    stats = [moments(psi, g) for g in generators]
    means = tuple(m for m, _ in stats)
    variances = tuple(v for _, v in stats)
    check_step(psi, H, generators, ds, variances)

    state = psi
    bases = {g.diagonal_basis for g in generators}
    if H is not None or Basis.MOMENTUM_ENERGY in bases:
        me = state.in_basis(Basis.MOMENTUM_ENERGY)
        arr = me.amplitudes
        if H is not None and ds != 0.0:
            arr = arr * np.exp(-1j * H.evaluate(psi.grids) * ds)
        arr = arr * _collapse_factor(generators, means, dB, ds, psi, Basis.MOMENTUM_ENERGY)
        state = me.with_amplitudes(arr)
    if Basis.POSITION_TIME in bases:
        pt = state.in_basis(Basis.POSITION_TIME)
        arr = pt.amplitudes * _collapse_factor(generators, means, dB, ds, psi, Basis.POSITION_TIME)
        state = pt.with_amplitudes(arr)
    state = state.in_basis(psi.basis)

    defect = state.norm_squared() / psi.norm_squared() - 1.0
    state = state.normalized()
    residual = abs(state.norm() - 1.0)
    return StepResult(state, means, variances, defect, residual)


def step_sde(
    psi: WaveFunction,
    H: OperatorSpec | None,
    generators: Sequence[OperatorSpec],
    dB: Sequence[float],
    ds: float,
) -> WaveFunction:
    """One Euler-Maruyama step of the normalised collapse equation"""
    return step_sde_with_diagnostics(psi, H, generators, dB, ds).state


def predicted_drift(
    psi: WaveFunction,
    H: OperatorSpec | None,
    generators: Sequence[OperatorSpec],
    B: OperatorSpec,
) -> float:
    """
    Ensemble drift of <B> per unit s:
        i<[H, B]> - sum_i lambda_i/2 <[A_i, [A_i, B]]>
    evaluated on the lattice.
    """
    Bpsi = apply_operator(psi, B)
    drift = 0.0
    if H is not None:
        Hpsi = apply_operator(psi, H)
        drift += -2.0 * inner(Hpsi, Bpsi).imag
    for g in generators:
        if g.strength == 0.0:
            continue
        Apsi = apply_operator(psi, g)
        AApsi = apply_operator(Apsi, g)
        double = 2.0 * inner(AApsi, Bpsi).real - 2.0 * inner(Apsi, apply_operator(Apsi, B)).real
        drift -= 0.5 * g.strength * double
    return float(drift)


@dataclass
class TrajectoryRecord:
    """
    Sampled observables of one trajectory.

    `means` and `variances` are keyed by operator name (generator labels and the
    per-particle observables E[i], t[i], x[i], p[i]) and hold one value per
    entry of `s_values`. `norm_defects` and `norm_residuals` hold one value per
    integration step.
    """
    trajectory: int
    seed: int
    ds: float
    s_values: np.ndarray
    means: dict[str, np.ndarray]
    variances: dict[str, np.ndarray]
    norm_defects: np.ndarray
    norm_residuals: np.ndarray
    generator_labels: tuple[str, ...] = ()
    sign_crossings: dict[str, int] = field(default_factory=dict)
    rejected_steps: int = 0
    antithetic: bool = False
    outcome: Outcome | None = None
    snapshots: list[tuple[float, WaveFunction]] = field(default_factory=list, repr=False)
    final_state: WaveFunction | None = field(default=None, repr=False)

    def series(self, name: str) -> np.ndarray:
        try:
            return self.means[name]
        except KeyError:
            raise KeyError(f"trajectory {self.trajectory} has no observable {name!r}") from None

    def to_rows(self) -> list[dict]:
        rows = []
        if len(self.norm_defects) == len(self.s_values) - 1:
            # one diagnostic per sample, as rebuilt by from_rows
            steps = np.arange(-1, len(self.s_values) - 1)
        else:
            steps = np.rint((self.s_values - self.s_values[0]) / self.ds).astype(int) - 1
        for k, s in enumerate(self.s_values):
            step = steps[k]
            row = {"trajectory": self.trajectory, "s": float(s)}
            for name, values in self.means.items():
                row[f"mean:{name}"] = float(values[k])
            for name, values in self.variances.items():
                row[f"var:{name}"] = float(values[k])
            row["norm_defect"] = float(self.norm_defects[step]) if step >= 0 else 0.0
            row["norm_residual"] = float(self.norm_residuals[step]) if step >= 0 else 0.0
            rows.append(row)
        return rows

    def summary(self) -> dict:
        return {
            "trajectory": self.trajectory,
            "seed": self.seed,
            "ds": self.ds,
            "antithetic": self.antithetic,
            "generators": list(self.generator_labels),
            "sign_crossings": dict(self.sign_crossings),
            "rejected_steps": self.rejected_steps,
            "max_norm_residual": float(np.max(self.norm_residuals, initial=0.0)),
            "outcome": None if self.outcome is None else vars(self.outcome).copy(),
        }

    @classmethod
    def from_rows(cls, rows: Sequence[dict], summary: dict) -> "TrajectoryRecord":
        """Rebuild a record (without states or per-step diagnostics) from stored rows"""
        if not rows:
            raise IntegrationError(f"trajectory {summary.get('trajectory')} has no samples")
        means: dict[str, np.ndarray] = {}
        variances: dict[str, np.ndarray] = {}
        for key in rows[0]:
            kind, _, name = key.partition(":")
            if kind == "mean":
                means[name] = np.array([r[key] for r in rows], dtype=float)
            elif kind == "var":
                variances[name] = np.array([r[key] for r in rows], dtype=float)
        outcome = summary.get("outcome")
        return cls(
            trajectory=int(summary["trajectory"]),
            seed=int(summary["seed"]),
            ds=float(summary["ds"]),
            s_values=np.array([r["s"] for r in rows], dtype=float),
            means=means,
            variances=variances,
            norm_defects=np.array([r["norm_defect"] for r in rows[1:]], dtype=float),
            norm_residuals=np.array([r["norm_residual"] for r in rows[1:]], dtype=float),
            generator_labels=tuple(summary.get("generators", ())),
            sign_crossings=dict(summary.get("sign_crossings", {})),
            rejected_steps=int(summary.get("rejected_steps", 0)),
            antithetic=bool(summary.get("antithetic", False)),
            outcome=None if outcome is None else Outcome(**outcome),
        )


def _observables(n_particles: int) -> list[OperatorSpec]:
    ops = []
    for i in range(n_particles):
        ops.extend([energy(i), time(i), position(i), momentum(i)])
    return ops


def _measure(state: WaveFunction, ops: Sequence[OperatorSpec]) -> dict[str, tuple[float, float]]:
    weights = {}
    for basis in (Basis.POSITION_TIME, Basis.MOMENTUM_ENERGY):
        density = state.in_basis(basis).density()
        weights[basis] = density / density.sum()
    out = {}
    for op in ops:
        w = weights[op.diagonal_basis]
        eig = op.evaluate(state.grids)
        mean = float(np.sum(w * eig))
        out[op.name] = (mean, max(float(np.sum(w * (eig - mean) ** 2)), 0.0))
    return out


def _step_count(S: float, ds: float) -> int:
    if not math.isfinite(S) or S <= 0:
        raise IntegrationError(f"S must be positive, got {S}")
    if not math.isfinite(ds) or ds <= 0:
        raise IntegrationError(f"ds must be positive, got {ds}")
    n = round(S / ds)
    if n < 1 or abs(n * ds - S) > 1e-9 * S:
        raise IntegrationError(f"ds={ds} does not divide S={S}")
    return n


def run_trajectory(
    psi0: WaveFunction,
    H: OperatorSpec | None,
    generators: Sequence[OperatorSpec],
    S: float,
    ds: float,
    seed: int,
    sample_every: int = 1,
    *,
    trajectory: int = 0,
    antithetic: bool = False,
    levels: Sequence[float] | None = None,
    snapshot_every: int = 0,
    observer: Observer | None = None,
) -> TrajectoryRecord:
    """
    Integrate from s = -S/2 to s = S/2.

    `observer(s, psi)` sees the state at the start of every step, which is what
    histogram accumulation needs. When `levels` is given, the final state is
    classified against the eigenvalues of the first generator.
    """
    n_steps = _step_count(S, ds)
    if sample_every < 1:
        raise IntegrationError("sample_every must be at least 1")
    generators = list(generators)
    noise = NoisePath(seed, ds, tuple(g.strength for g in generators), trajectory, antithetic)
    increments = noise.increments(n_steps)
    bridge = noise.bridge()
    ops = list(generators) + _observables(psi0.n_particles)
    labels = tuple(g.name for g in generators)
    s0 = -0.5 * S

    state = psi0.normalized()
    samples_s: list[float] = []
    sampled: list[dict[str, tuple[float, float]]] = []
    defects = np.zeros(n_steps)
    residuals = np.zeros(n_steps)
    crossings = {name: 0 for name in labels}
    previous: tuple[float, ...] | None = None
    rejected = 0
    snapshots: list[tuple[float, WaveFunction]] = []

    def advance(psi: WaveFunction, dB: np.ndarray, h: float, depth: int, s: float):
        try:
            result = step_sde_with_diagnostics(psi, H, generators, dB, h)
            return result.state, result.means, result.norm_defect, result.norm_residual, 0
        except StepControlError as exc:
            if depth >= MAX_HALVINGS:
                raise StepControlError(
                    f"trajectory {trajectory}: step at s={s:.6g} still rejected after "
                    f"{MAX_HALVINGS} halvings ({exc})",
                    ds=h,
                    suggested_ds=exc.suggested_ds,
                    s=s,
                    trajectory=trajectory,
                ) from exc
            logger.debug(f"Trajectory {trajectory}: splitting step at s={s:.6g}, ds={h:.3g}")
            first, second = bridge.split(dB, h)
            psi, means, d1, r1, n1 = advance(psi, first, h / 2, depth + 1, s)
            psi, _, d2, r2, n2 = advance(psi, second, h / 2, depth + 1, s + h / 2)
            return psi, means, d1 + d2, max(r1, r2), n1 + n2 + 1

    samples_s.append(s0)
    sampled.append(_measure(state, ops))
    if snapshot_every:
        snapshots.append((s0, state))
    for k in range(n_steps):
        s = s0 + k * ds
        if observer is not None:
            observer(s, state)
        state, means, defects[k], residuals[k], retries = advance(state, increments[k], ds, 0, s)
        rejected += retries
        if previous is not None:
            for name, before, now in zip(labels, previous, means):
                if before * now < 0:
                    crossings[name] += 1
        previous = means
        s_next = s0 + (k + 1) * ds
        if (k + 1) % sample_every == 0 or k + 1 == n_steps:
            samples_s.append(s_next)
            sampled.append(_measure(state, ops))
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snapshots.append((s_next, state))

    names = [op.name for op in ops]
    record = TrajectoryRecord(
        trajectory=trajectory,
        seed=int(seed),
        ds=ds,
        s_values=np.array(samples_s),
        means={n: np.array([m[n][0] for m in sampled]) for n in names},
        variances={n: np.array([m[n][1] for m in sampled]) for n in names},
        norm_defects=defects,
        norm_residuals=residuals,
        generator_labels=labels,
        sign_crossings=crossings,
        rejected_steps=rejected,
        antithetic=antithetic,
        snapshots=snapshots,
        final_state=state,
    )
    if levels is not None and generators:
        first = labels[0]
        record.outcome = classify_outcome(
            record.means[first][-1], record.variances[first][-1], levels
        )
    if rejected:
        logger.debug(f"Trajectory {trajectory}: {rejected} step(s) subdivided")
    return record
