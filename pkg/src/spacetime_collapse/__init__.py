"""Relativistic continuous-collapse simulation with quantised time variables."""

__version__ = "1.0.0"

# Expose key classes and functions for easier imports
from .config import ScenarioConfig, load_config, parse_config
from .dynamics import TrajectoryRecord, run_trajectory, step_deterministic, step_sde
from .ensemble import run_ensemble
from .grid import Basis, DensityMatrix, GridSpec, WaveFunction, make_grid
from .master import decay_solution, master_step
from .operators import OperatorSpec, collapse_mass, hamiltonian_multi, hamiltonian_single, interval_operator
