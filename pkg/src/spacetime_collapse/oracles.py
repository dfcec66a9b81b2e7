"""
Closed-form Gaussian solutions used as ground truth for the numerics.

A free particle prepared as a Gaussian packet in both x and t spreads in s as

    sigma_x(s)^2 = sigma_x^2 + (s / 2 m sigma_x)^2
    sigma_t(s)^2 = sigma_t^2 + (s / 2 m sigma_t)^2

with its centre moving along (x_bar + s p_bar/m, t_bar + s E_bar/m). Averaging
over s in [-S/2, S/2] gives the world-tube density.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, stats

from .errors import GridError, OperatorError
from .grid import Basis, GridSpec, WaveFunction, check_support, lattice_coordinates
from .operators import boost_event

logger = logging.getLogger("spacetime-collapse.oracles")

# regime limits for the world-tube closed form
SPREAD_LIMIT = 0.1
WINDOW_SIGMAS = 10.0


@dataclass(frozen=True)
class GaussianParams:
    sigma_x: float
    sigma_t: float
    x_bar: float = 0.0
    t_bar: float = 0.0
    p_bar: float = 0.0
    E_bar: float = 0.0
    mass: float = 1.0

    def __post_init__(self):
        for name in ("sigma_x", "sigma_t", "mass"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise OperatorError(f"{name} must be positive, got {value}")
        for name in ("x_bar", "t_bar", "p_bar", "E_bar"):
            if not math.isfinite(getattr(self, name)):
                raise OperatorError(f"{name} must be finite")

    def centre(self, s: float) -> tuple[float, float]:
        return self.x_bar + s * self.p_bar / self.mass, self.t_bar + s * self.E_bar / self.mass

    def spreads(self, s: float) -> tuple[float, float]:
        m = self.mass
        sx = math.sqrt(self.sigma_x ** 2 + (s / (2 * m * self.sigma_x)) ** 2)
        st = math.sqrt(self.sigma_t ** 2 + (s / (2 * m * self.sigma_t)) ** 2)
        return sx, st


def _as_tuple(params: GaussianParams | Sequence[GaussianParams]) -> tuple[GaussianParams, ...]:
    if isinstance(params, GaussianParams):
        return (params,)
    return tuple(params)


def _axis_amplitude(sigma: float, centre: float, mean_k: float, y, s_over_2m: complex, sign: int):
    # sign=+1 for the x factor, -1 for the t factor (opposite Fourier kernel)
    width = sigma ** 2 + sign * 1j * s_over_2m
    prefactor = (sigma ** 2 / (2 * math.pi)) ** 0.25 / np.sqrt(width)
    arg = sign * 1j * (y - centre) + 2 * sigma ** 2 * mean_k
    return prefactor * np.exp(-((sigma * mean_k) ** 2)) * np.exp(arg ** 2 / (4 * width))


def gaussian_amplitude(params: GaussianParams, x, t, s: float = 0.0):
    """Position-time amplitude of a free Gaussian packet after parameter s"""
    half = s / (2 * params.mass)
    fx = _axis_amplitude(params.sigma_x, params.x_bar, params.p_bar, np.asarray(x), half, +1)
    ft = _axis_amplitude(params.sigma_t, params.t_bar, params.E_bar, np.asarray(t), half, -1)
    return fx * ft


def gaussian_momentum_amplitude(params: GaussianParams, p, E, s: float = 0.0):
    """Momentum-energy amplitude, including the free phase exp(-i s (p^2 - E^2) / 2m)"""
    p, E = np.asarray(p), np.asarray(E)
    fp = (2 * params.sigma_x ** 2 / math.pi) ** 0.25 * np.exp(
        -params.sigma_x ** 2 * (p - params.p_bar) ** 2 - 1j * params.x_bar * p
    )
    fE = (2 * params.sigma_t ** 2 / math.pi) ** 0.25 * np.exp(
        -params.sigma_t ** 2 * (E - params.E_bar) ** 2 + 1j * params.t_bar * E
    )
    return fp * fE * np.exp(-1j * s * (p ** 2 - E ** 2) / (2 * params.mass))


def gaussian_density(params: GaussianParams, x, t, s: float = 0.0):
    """|psi(x, t, s)|^2 from the spreading law"""
    (cx, ct), (sx, st) = params.centre(s), params.spreads(s)
    return stats.norm.pdf(x, loc=cx, scale=sx) * stats.norm.pdf(t, loc=ct, scale=st)


def gaussian_state(
    params: GaussianParams | Sequence[GaussianParams],
    grids: Sequence[GridSpec],
    s: float = 0.0,
    basis: Basis = Basis.POSITION_TIME,
) -> WaveFunction:
    """Product of per-particle Gaussian packets sampled on the lattice, normalised"""
    packets = _as_tuple(params)
    grids = tuple(grids)
    if len(packets) != len(grids):
        raise GridError(f"{len(packets)} packets for {len(grids)} particle lattices")
    amp = 1.0
    for packet, (a, b) in zip(packets, lattice_coordinates(grids, basis)):
        if basis is Basis.POSITION_TIME:
            amp = amp * gaussian_amplitude(packet, a, b, s)
        else:
            amp = amp * gaussian_momentum_amplitude(packet, a, b, s)
    psi = WaveFunction(grids, np.broadcast_to(amp, tuple(n for g in grids for n in g.shape)), basis)
    psi = psi.normalized()
    check_support(psi, bases=(Basis.POSITION_TIME, Basis.MOMENTUM_ENERGY))
    return psi


class RegimeFlags(NamedTuple):
    spread_ratio: float
    window_sigmas: float

    @property
    def small_spreading(self) -> bool:
        return self.spread_ratio <= SPREAD_LIMIT

    @property
    def long_window(self) -> bool:
        return self.window_sigmas >= WINDOW_SIGMAS

    @property
    def ok(self) -> bool:
        return self.small_spreading and self.long_window


class WorldTube(NamedTuple):
    density: np.ndarray
    regime: RegimeFlags


def world_tube_regime(params: GaussianParams, S: float) -> RegimeFlags:
    sigma_min = min(params.sigma_x, params.sigma_t)
    spread_ratio = S / (params.mass * sigma_min ** 2)
    window = S * abs(params.E_bar) / params.mass / params.sigma_t
    return RegimeFlags(spread_ratio, window)


def _ridge_width_sq(params: GaussianParams) -> float:
    return params.sigma_x ** 2 * params.E_bar ** 2 + params.sigma_t ** 2 * params.p_bar ** 2


def world_tube_density(params: GaussianParams, S: float, x, t) -> WorldTube:
    """
    Large-S, small-spreading approximation of (1/S) integral ds |psi(x, t, s)|^2.

    The ridge follows E_bar (x - x_bar) = p_bar (t - t_bar). Outside the regime
    S << m sigma^2 and S E_bar / m >> sigma_t the density is still returned, with
    the flags set and a warning logged.
    """
    if S <= 0:
        raise OperatorError("S must be positive")
    if params.E_bar <= 0:
        raise OperatorError("the world-tube density needs a positive mean energy")
    regime = world_tube_regime(params, S)
    if not regime.ok:
        logger.warning(
            f"World-tube closed form outside its regime: S/(m sigma^2)={regime.spread_ratio:.3g}, "
            f"S E/(m sigma_t)={regime.window_sigmas:.3g}"
        )
    w2 = _ridge_width_sq(params)
    x, t = np.asarray(x, dtype=float), np.asarray(t, dtype=float)
    ridge = params.E_bar * (x - params.x_bar) - params.p_bar * (t - params.t_bar)
    density = params.mass / (S * math.sqrt(2 * math.pi * w2)) * np.exp(-(ridge ** 2) / (2 * w2))
    return WorldTube(density, regime)


def world_tube_window(params: GaussianParams, S: float) -> float:
    """Half-width in t over which the closed form integrates to one"""
    return S * params.E_bar / (2 * params.mass)


def time_marginal_density(params: GaussianParams, S: float) -> float:
    return params.mass / (S * params.E_bar)


def conditional_variance(params: GaussianParams) -> float:
    return _ridge_width_sq(params) / params.E_bar ** 2


def world_tube_quadrature(params: GaussianParams, S: float, x, t, epsrel: float = 1e-9) -> np.ndarray:
    """Direct adaptive quadrature of (1/S) integral ds |psi(x, t, s)|^2"""
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    value, _ = integrate.quad_vec(
        lambda s: gaussian_density(params, x, t, s), -S / 2, S / 2, epsrel=epsrel, epsabs=0.0
    )
    return value / S


def conditional_trajectory(params: GaussianParams) -> tuple[float, float]:
    """Slope and intercept of the conditional world line x = x_bar + (p/E)(t - t_bar)"""
    if params.E_bar == 0:
        raise OperatorError("the conditional world line needs a non-zero mean energy")
    slope = params.p_bar / params.E_bar
    return slope, params.x_bar - slope * params.t_bar


def boost_params(params: GaussianParams, theta: float) -> GaussianParams:
    """Packet means seen from the frame boosted by theta; widths are carried over unchanged"""
    ch, sh = math.cosh(theta), math.sinh(theta)
    x_bar, t_bar = boost_event(params.x_bar, params.t_bar, theta)
    return replace(
        params,
        x_bar=x_bar,
        t_bar=t_bar,
        p_bar=params.p_bar * ch - params.E_bar * sh,
        E_bar=params.E_bar * ch - params.p_bar * sh,
    )


def on_shell_state(
    grid: GridSpec,
    mu2: float,
    phi: Callable[[np.ndarray], np.ndarray],
    momenta: Sequence[float] | None = None,
    tolerance: float = 1e-9,
) -> WaveFunction:
    """
    Positive-energy Klein-Gordon solution sum_p phi(p) |p, omega_p> on one lattice.

    Only momenta whose omega_p = sqrt(p^2 + mu2) falls on an energy lattice point
    (within `tolerance` * dE) are populated, so the state is exactly on shell.
    """
    if mu2 < 0:
        raise OperatorError("on-shell construction needs a non-negative mass squared")
    p_axis, E_axis = grid.p_axis, grid.E_axis
    candidates = p_axis if momenta is None else np.asarray(momenta, dtype=float)
    arr = np.zeros(grid.shape, dtype=np.complex128)
    placed = 0
    for p in candidates:
        i = int(round((p - p_axis[0]) / grid.dp))
        if i < 0 or i >= p_axis.size or abs(p_axis[i] - p) > tolerance * grid.dp:
            raise GridError(f"momentum {p} is not a lattice point")
        omega = math.sqrt(p_axis[i] ** 2 + mu2)
        j = int(round((omega - E_axis[0]) / grid.dE))
        if 0 <= j < E_axis.size and abs(E_axis[j] - omega) <= tolerance * grid.dE:
            arr[i, j] = phi(np.asarray(p_axis[i]))
            placed += 1
        elif momenta is not None:
            raise GridError(f"omega({p}) = {omega} is not on the energy lattice")
    if placed == 0 or not np.any(arr):
        raise GridError("no momentum has its on-shell energy on the lattice")
    return WaveFunction((grid,), arr, Basis.MOMENTUM_ENERGY).normalized().to_position_time()


def _kg_terms(psi: WaveFunction, mu2: float) -> tuple[np.ndarray, np.ndarray, float]:
    state = psi.in_basis(Basis.MOMENTUM_ENERGY)
    total = 0.0
    scale = 0.0
    for p, E in lattice_coordinates(state.grids, Basis.MOMENTUM_ENERGY):
        total = total + p ** 2 - E ** 2 + mu2
        scale = scale + p ** 2 + E ** 2 + abs(mu2)
    return state.amplitudes, np.broadcast_to(total, state.amplitudes.shape), scale


def kg_residual(psi: WaveFunction, mu2: float) -> float:
    """||(d_t^2 - d_x^2 + mu^2) psi|| / ||psi||, with derivatives as Fourier multipliers"""
    amps, symbol, _ = _kg_terms(psi, mu2)
    return float(np.linalg.norm(symbol * amps) / np.linalg.norm(amps))


def kg_relative_residual(psi: WaveFunction, mu2: float) -> float:
    """kg_residual divided by ||(p^2 + E^2 + |mu^2|) psi|| / ||psi||"""
    amps, symbol, scale = _kg_terms(psi, mu2)
    scale = np.broadcast_to(scale, amps.shape)
    return float(np.linalg.norm(symbol * amps) / np.linalg.norm(scale * amps))
