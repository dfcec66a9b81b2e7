"""
Exception types raised by the simulator.

Library code raises these; only the command-line layer turns them into exit codes.
"""

from __future__ import annotations


class SimulationError(Exception):
    """Base class for every error raised by spacetime_collapse"""


class GridError(SimulationError, ValueError):
    """Invalid lattice sizes, spacings or mismatched grids"""


class BasisMismatchError(SimulationError, ValueError):
    """A state or density matrix is in the wrong basis for the requested operation"""


class LatticeOverflowError(SimulationError):
    """Probability has reached the lattice edges (wrap-around monitor)"""

    def __init__(self, message: str, edge_probability: float):
        super().__init__(message)
        self.edge_probability = edge_probability

    def __reduce__(self):
        return type(self), (self.args[0], self.edge_probability)


class StepControlError(SimulationError):
    """A stochastic step exceeded the perturbative step-control bound"""

    def __init__(
        self,
        message: str,
        ds: float,
        suggested_ds: float,
        s: float | None = None,
        trajectory: int | None = None,
    ):
        super().__init__(message)
        self.ds = ds
        self.suggested_ds = suggested_ds
        self.s = s
        self.trajectory = trajectory

    def __reduce__(self):
        return type(self), (self.args[0], self.ds, self.suggested_ds, self.s, self.trajectory)


class NonCommutingGeneratorsError(SimulationError):
    """A closed-form decay was requested for generators without a joint eigenbasis"""


class DegenerateConfigurationError(SimulationError, ValueError):
    """Two branches share the same configuration and cannot be told apart by collapse"""


class EmptyTimeSliceError(SimulationError):
    """The time marginal vanishes at the requested time"""


class InsufficientSamplesError(SimulationError, ValueError):
    """Too few samples or trajectories for a statistical estimate"""


class ConfigError(SimulationError):
    """Invalid scenario file; carries the offending line when it can be located"""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.detail = message

    def __reduce__(self):
        return type(self), (self.detail, self.path, self.line)


class OperatorError(SimulationError, ValueError):
    """Invalid operator parameters (non-positive mass, repeated particle index, ...)"""


class IntegrationError(SimulationError, ValueError):
    """Invalid integration window, step size or sampling interval"""
