"""
Spacetime densities and ensemble statistics built from simulation output.

The spacetime density of particle i is the uniform s-average of its (x, t)
marginal,

    P_i(x, t) = (1/S) sum_k ds |psi(x, t; s_k)|^2   (other particles summed out),

so for entangled states the multi-particle density is treated as a product of
these marginals and per-s correlations are discarded.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dynamics import Outcome, TrajectoryRecord, classify_outcome
from .errors import (
    BasisMismatchError,
    EmptyTimeSliceError,
    GridError,
    InsufficientSamplesError,
)
from .grid import Basis, DensityMatrix, GridSpec, WaveFunction, lattice_basis

logger = logging.getLogger("spacetime-collapse.analysis")

__all__ = [
    "SpacetimeHistogram",
    "empty_histogram",
    "accumulate",
    "merge",
    "average",
    "time_marginal",
    "conditional_density",
    "conditional_moments",
    "fit_world_line",
    "density_operator_histogram",
    "fit_decay_rate",
    "born_statistics",
    "classify_outcome",
    "martingale_report",
    "drift_regression",
]

# time slices lighter than this fraction of the heaviest are treated as empty
EMPTY_SLICE_FRACTION = 1e-12


@dataclass(frozen=True, eq=False)
class SpacetimeHistogram:
    grids: tuple[GridSpec, ...]
    S: float
    densities: tuple[np.ndarray, ...]
    samples: int = 0

    def mass(self, particle: int = 0) -> float:
        grid = self.grids[particle]
        return float(self.densities[particle].sum() * grid.cell_volume(Basis.POSITION_TIME))

    def to_rows(self, particle: int = 0) -> list[tuple[float, float, float]]:
        grid = self.grids[particle]
        density = self.densities[particle]
        return [
            (float(x), float(t), float(density[i, j]))
            for i, x in enumerate(grid.x_axis)
            for j, t in enumerate(grid.t_axis)
        ]


def empty_histogram(grids: Sequence[GridSpec], S: float) -> SpacetimeHistogram:
    if S <= 0:
        raise GridError("S must be positive")
    grids = tuple(grids)
    return SpacetimeHistogram(grids, float(S), tuple(np.zeros(g.shape) for g in grids), 0)


def _marginals(psi: WaveFunction) -> list[np.ndarray]:
    density = psi.density()
    out = []
    for i in range(psi.n_particles):
        keep = (2 * i, 2 * i + 1)
        others = tuple(a for a in range(density.ndim) if a not in keep)
        volume = math.prod(
            g.cell_volume(Basis.POSITION_TIME) for j, g in enumerate(psi.grids) if j != i
        )
        out.append(density.sum(axis=others) * volume if others else density.copy())
    return out


def accumulate(hist: SpacetimeHistogram, psi: WaveFunction, ds: float) -> SpacetimeHistogram:
    """Add (ds/S) |psi|^2 marginalised onto each particle's (x, t) plane"""
    if psi.basis is not Basis.POSITION_TIME:
        raise BasisMismatchError("accumulate expects a position-time state")
    if psi.grids != hist.grids:
        raise GridError("state and histogram live on different lattices")
    weight = ds / hist.S
    densities = tuple(d + weight * m for d, m in zip(hist.densities, _marginals(psi)))
    return SpacetimeHistogram(hist.grids, hist.S, densities, hist.samples + 1)


def merge(h1: SpacetimeHistogram, h2: SpacetimeHistogram) -> SpacetimeHistogram:
    if h1.grids != h2.grids or h1.S != h2.S:
        raise GridError("only histograms over the same lattice and window can be merged")
    densities = tuple(a + b for a, b in zip(h1.densities, h2.densities))
    return SpacetimeHistogram(h1.grids, h1.S, densities, h1.samples + h2.samples)


def average(histograms: Sequence[SpacetimeHistogram]) -> SpacetimeHistogram:
    """Ensemble mean of per-trajectory histograms, merged in the given order"""
    if not histograms:
        raise InsufficientSamplesError("no histograms to average")
    total = functools.reduce(merge, histograms)
    n = len(histograms)
    return SpacetimeHistogram(total.grids, total.S, tuple(d / n for d in total.densities), total.samples)


def time_marginal(hist: SpacetimeHistogram, particle: int = 0) -> np.ndarray:
    return hist.densities[particle].sum(axis=0) * hist.grids[particle].dx


def conditional_density(hist: SpacetimeHistogram, t: float, particle: int = 0) -> np.ndarray:
    """P(x|t) = P(x, t) / P(t), normalised over x"""
    grid = hist.grids[particle]
    j = grid.index_of(t, 1)
    marginal = time_marginal(hist, particle)
    if marginal[j] <= EMPTY_SLICE_FRACTION * max(marginal.max(), 0.0) or marginal[j] <= 0.0:
        raise EmptyTimeSliceError(f"P(t) vanishes at t={t:g}")
    return hist.densities[particle][:, j] / marginal[j]


@dataclass
class ConditionalMoments:
    t: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    weight: np.ndarray


def conditional_moments(
    hist: SpacetimeHistogram,
    particle: int = 0,
    min_fraction: float = 1e-3,
    t_window: tuple[float, float] | None = None,
) -> ConditionalMoments:
    """Mean and variance of P(x|t) for every time slice holding at least min_fraction of the peak P(t)"""
    grid = hist.grids[particle]
    marginal = time_marginal(hist, particle)
    populated = marginal > min_fraction * marginal.max()
    if t_window is not None:
        populated &= (grid.t_axis >= t_window[0]) & (grid.t_axis <= t_window[1])
    if not populated.any():
        raise EmptyTimeSliceError("no populated time slices")
    x = grid.x_axis[:, None]
    cond = hist.densities[particle][:, populated] / marginal[populated]
    mean = np.sum(cond * x, axis=0) * grid.dx
    var = np.sum(cond * (x - mean) ** 2, axis=0) * grid.dx
    return ConditionalMoments(grid.t_axis[populated], mean, var, marginal[populated])


@dataclass
class WorldLineFit:
    slope: float
    intercept: float
    slope_stderr: float
    points: int


def fit_world_line(
    hist: SpacetimeHistogram, particle: int = 0, t_window: tuple[float, float] | None = None
) -> WorldLineFit:
    """Straight-line fit of the conditional means <x>(t)"""
    cm = conditional_moments(hist, particle, t_window=t_window)
    if cm.t.size < 3:
        raise InsufficientSamplesError("fitting a world line needs at least three time slices")
    fit = stats.linregress(cm.t, cm.mean)
    return WorldLineFit(float(fit.slope), float(fit.intercept), float(fit.stderr), int(cm.t.size))


def density_operator_histogram(
    states: Sequence[WaveFunction], ds: float, S: float
) -> tuple[DensityMatrix, SpacetimeHistogram]:
    """
    Operator form rho = (1/S) sum_k ds |psi_k><psi_k| for one particle on a small
    lattice, and the density read off its diagonal.
    """
    if not states:
        raise InsufficientSamplesError("no states to average")
    grids = states[0].grids
    if len(grids) != 1:
        raise GridError("the operator form is built for a single particle")
    cell = grids[0].cell_volume(Basis.POSITION_TIME)
    rho = None
    for psi in states:
        if psi.basis is not Basis.POSITION_TIME:
            raise BasisMismatchError("density_operator_histogram expects position-time states")
        v = psi.amplitudes.reshape(-1) * math.sqrt(cell)
        term = np.outer(v, v.conj()) * (ds / S)
        rho = term if rho is None else rho + term
    matrix = DensityMatrix(lattice_basis(grids, Basis.POSITION_TIME), rho)
    density = matrix.diagonal().reshape(grids[0].shape) / cell
    return matrix, SpacetimeHistogram(grids, float(S), (density,), len(states))


@dataclass
class DecayFit:
    strength: float
    slope: float
    intercept: float
    slope_stderr: float
    points: int


def fit_decay_rate(s_values: Sequence[float], magnitudes: Sequence[float], delta_a: float) -> DecayFit:
    """Least-squares slope of log|rho_ij| against s; lambda = -2 slope / delta_a^2"""
    s = np.asarray(s_values, dtype=float)
    mags = np.asarray(magnitudes, dtype=float)
    if s.size != mags.size:
        raise ValueError("s_values and magnitudes differ in length")
    if s.size < 10:
        raise InsufficientSamplesError("fit_decay_rate needs at least 10 samples")
    if np.any(mags <= 0):
        raise ValueError("off-diagonal magnitudes must be positive")
    if delta_a == 0:
        raise ValueError("eigenvalue gap must be non-zero")
    fit = stats.linregress(s, np.log(mags))
    return DecayFit(-2.0 * fit.slope / delta_a ** 2, float(fit.slope), float(fit.intercept), float(fit.stderr), int(s.size))


@dataclass
class BornReport:
    probabilities: list[float]
    counts: list[int]
    frequencies: list[float]
    chi2: float
    p_value: float
    collapsed: int
    excluded: int
    within_3_sigma: list[bool] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.within_3_sigma)

    def to_dict(self) -> dict:
        return {
            "probabilities": self.probabilities,
            "counts": self.counts,
            "frequencies": self.frequencies,
            "chi2": self.chi2,
            "p_value": self.p_value,
            "collapsed": self.collapsed,
            "excluded": self.excluded,
            "within_3_sigma": self.within_3_sigma,
            "pass": self.passed,
        }


def born_statistics(outcomes: Sequence[Outcome | None], probabilities: Sequence[float]) -> BornReport:
    """
    Outcome frequencies against |c_i|^2 with a chi-square goodness of fit.
    Uncollapsed (or unclassified) trajectories are excluded and counted.
    """
    probs = np.asarray(probabilities, dtype=float)
    probs = probs / probs.sum()
    collapsed = [o for o in outcomes if o is not None and o.collapsed]
    excluded = len(outcomes) - len(collapsed)
    if excluded:
        logger.warning(f"Born statistics: {excluded} of {len(outcomes)} trajectories did not collapse and are excluded")
    n = len(collapsed)
    if n == 0:
        raise InsufficientSamplesError("no collapsed trajectories")
    counts = np.bincount([o.index for o in collapsed], minlength=probs.size)[: probs.size]
    freqs = counts / n

    expected = n * probs
    support = expected > 0
    if np.any(counts[~support] > 0):
        chi2, p_value = math.inf, 0.0
    elif support.sum() < 2:
        chi2, p_value = 0.0, 1.0
    else:
        result = stats.chisquare(counts[support], expected[support])
        chi2, p_value = float(result.statistic), float(result.pvalue)

    sigma = np.sqrt(probs * (1 - probs) / n)
    within = np.abs(freqs - probs) <= 3 * sigma + 1e-12
    return BornReport(
        probabilities=probs.tolist(),
        counts=counts.astype(int).tolist(),
        frequencies=freqs.tolist(),
        chi2=chi2,
        p_value=p_value,
        collapsed=n,
        excluded=excluded,
        within_3_sigma=within.tolist(),
    )


@dataclass
class MartingaleReport:
    observable: str
    mean_drift: float
    stderr: float
    predicted: float
    trajectories: int
    passed: bool

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "mean_drift": self.mean_drift,
            "stderr": self.stderr,
            "predicted": self.predicted,
            "trajectories": self.trajectories,
            "pass": self.passed,
        }


Predicted = float | Callable[[TrajectoryRecord], float] | None


def _paired(records: Sequence[TrajectoryRecord], values: np.ndarray) -> np.ndarray:
    """Average antithetic partners so each pair counts as one independent sample"""
    if not records or not all(r.antithetic for r in records):
        return values
    groups: dict[int, list[float]] = {}
    for record, value in zip(records, values):
        groups.setdefault(record.trajectory // 2, []).append(value)
    return np.array([np.mean(v) for _, v in sorted(groups.items())])


def martingale_report(
    records: Sequence[TrajectoryRecord],
    observable: str,
    predicted: Predicted = None,
    min_trajectories: int = 100,
    atol: float = 1e-9,
) -> MartingaleReport:
    """
    Ensemble-mean drift of <observable> per unit s over the whole run.

    `predicted` is the expected drift per unit s: zero for martingales, a number,
    or a function of the record (for example <E>/m for the time drift). Passes
    when the mean deviation lies within 3 standard errors.
    """
    if len(records) < min_trajectories:
        raise InsufficientSamplesError(
            f"martingale_report needs at least {min_trajectories} trajectories, got {len(records)}"
        )
    rates = []
    expected = []
    for record in records:
        series = record.series(observable)
        span = record.s_values[-1] - record.s_values[0]
        rates.append((series[-1] - series[0]) / span)
        if callable(predicted):
            expected.append(predicted(record))
        else:
            expected.append(0.0 if predicted is None else float(predicted))
    deviation = _paired(records, np.asarray(rates) - np.asarray(expected))
    rates_paired = _paired(records, np.asarray(rates))
    stderr = float(np.std(deviation, ddof=1) / math.sqrt(deviation.size))
    mean_dev = float(np.mean(deviation))
    return MartingaleReport(
        observable=observable,
        mean_drift=float(np.mean(rates_paired)),
        stderr=stderr,
        predicted=float(np.mean(expected)),
        trajectories=len(records),
        passed=abs(mean_dev) <= max(3.0 * stderr, atol),
    )


@dataclass
class DriftFit:
    observable: str
    coefficients: dict[str, float]
    stderr: dict[str, float]
    points: int

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "coefficients": self.coefficients,
            "stderr": self.stderr,
            "points": self.points,
        }


def drift_regression(
    records: Sequence[TrajectoryRecord], observable: str, regressors: Sequence[str]
) -> DriftFit:
    """
    Pooled least squares of per-sample increments d<observable>/ds against the
    regressors' values at the start of each interval (no intercept).
    """
    ys, xs = [], []
    for record in records:
        series = record.series(observable)
        ds = np.diff(record.s_values)
        ys.append(np.diff(series) / ds)
        xs.append(np.column_stack([record.series(name)[:-1] for name in regressors]))
    y = np.concatenate(ys)
    X = np.vstack(xs)
    if y.size <= len(regressors):
        raise InsufficientSamplesError("not enough increments for the regression")
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < len(regressors):
        raise InsufficientSamplesError("regressors are linearly dependent over the samples")
    residual = y - X @ coef
    sigma2 = float(residual @ residual) / (y.size - len(regressors))
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return DriftFit(
        observable=observable,
        coefficients={name: float(c) for name, c in zip(regressors, coef)},
        stderr={name: float(math.sqrt(max(cov[k, k], 0.0))) for k, name in enumerate(regressors)},
        points=int(y.size),
    )
