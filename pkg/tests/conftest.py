import os

os.environ.setdefault("SPACETIME_COLLAPSE_DISABLE_TELEMETRY", "1")

from pathlib import Path

import pytest

from spacetime_collapse.grid import make_grid
from spacetime_collapse.oracles import GaussianParams, gaussian_state

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def packet_params():
    return GaussianParams(sigma_x=1.0, sigma_t=1.0, p_bar=0.5, E_bar=1.5, mass=1.0)


@pytest.fixture
def packet_grid():
    return make_grid(32, 32, 0.5, 0.5, 0.0, 0.0, 0.5, 1.5)


@pytest.fixture
def packet(packet_params, packet_grid):
    return gaussian_state(packet_params, (packet_grid,))


@pytest.fixture
def two_level_grid():
    return make_grid(4, 4, 1.0, 1.0)


@pytest.fixture
def two_level_text():
    """Factory for a one-particle, two-point superposition scenario"""

    def make(
        p1=0.5,
        trajectories=4,
        S=5.0,
        ds=0.1,
        seed=11,
        strength=1.0,
        sample_every=None,
        analysis="",
        extra_run="",
    ):
        sample_every = sample_every or round(S / ds)
        return f"""
schema_version = 1
name = "two-level"

[grid]
n_x = 4
n_t = 4
dx = 1.0
dt = 1.0

[[particles]]
kind = "superposition"
points = [[0.0, 0.0], [1.0, 0.0]]
amplitudes = [{p1 ** 0.5!r}, {(1 - p1) ** 0.5!r}]

[hamiltonian]
enabled = false

[[generators]]
kind = "position"
particles = [0]
strength = {strength!r}

[run]
S = {S!r}
ds = {ds!r}
sample_every = {sample_every}
trajectories = {trajectories}
seed = {seed}
{extra_run}

[analysis]
{analysis}
"""

    return make


@pytest.fixture
def scenario_file(tmp_path, two_level_text):
    """Write scenario text to a file and return its path"""

    def write(text=None, name="scenario.toml"):
        path = tmp_path / name
        path.write_text(text if text is not None else two_level_text(), encoding="utf-8")
        return path

    return write
