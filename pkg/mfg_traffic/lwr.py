"""Reference LWR march with the same Lax-Friedrichs step as the coupled system."""

import logging
import typing as t

import numpy as np
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass

from .costs import LwrTrackingCost
from .discretization import ProblemSpec, assemble_residual, lf_step, pack_arrays
from .exceptions import ConfigurationError
from .grid import ScalarField, SpaceTimeGrid, cell_averages

logger = logging.getLogger(__name__)


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class LwrRun:
    """Density and speed of one LWR march; ``u = U(rho)`` on every level."""

    grid: SpaceTimeGrid
    speed: t.Callable
    initial_density: t.Callable
    rho: ScalarField
    u: ScalarField

    def masses(self) -> np.ndarray:
        """Total mass on every time level."""

        return self.rho.values.sum(axis=1) * self.grid.dx

    def mass_drift(self) -> float:
        masses = self.masses()
        return float(np.max(np.abs(masses - masses[0])) / max(abs(masses[0]), np.finfo(float).tiny))


def solve_lwr(grid: SpaceTimeGrid, speed, initial_density) -> LwrRun:
    """March ``rho_t + (rho U(rho))_x = 0`` forward with ``u = U(rho)`` in each step.

    :param grid: The space-time grid.
    :param speed: Vectorized equilibrium speed ``U``.
    :param initial_density: Vectorized ``rho_0(x)``.
    :raises ConfigurationError: on a CFL violation.
    """

    rho = np.empty(grid.shape)
    u = np.empty(grid.shape)
    rho[0] = cell_averages(initial_density, grid)
    u[0] = speed(rho[0])
    for n in range(grid.num_steps):
        rho[n + 1] = lf_step(rho[n], u[n], grid)
        u[n + 1] = speed(rho[n + 1])

    run = LwrRun(
        grid=grid,
        speed=speed,
        initial_density=initial_density,
        rho=ScalarField(grid, rho, name="rho"),
        u=ScalarField(grid, u, name="u"),
    )
    logger.debug("LWR march on %dx%d, mass drift %.2e", grid.num_cells, grid.num_steps, run.mass_drift())
    return run


def lwr_unknowns(lwr: LwrRun) -> np.ndarray:
    """Pack ``(rho, U(rho), V = 0)`` as an unknown vector."""

    return pack_arrays(lwr.rho.values, lwr.u.values[:-1], np.zeros(lwr.grid.shape))


def lwr_guess(spec: ProblemSpec) -> np.ndarray:
    """Newton guess from the LWR march of the model's own equilibrium speed.

    This is the ``T -> 0`` limit of the equilibrium, so it sits close to the
    solution on short horizons.
    """

    return lwr_unknowns(solve_lwr(spec.grid, spec.cost.equilibrium_speed, spec.initial_density))


def verify_theorem1(lwr: LwrRun, spec: ProblemSpec) -> float:
    """Residual of the LWR solution inside the LWR-tracking mean field game.

    :return: ``max|F(rho, U(rho), 0)|``.
    :raises ConfigurationError: if ``spec`` does not track ``lwr.speed`` on the
        same grid and initial density with a zero terminal cost.
    """

    if not isinstance(spec.cost, LwrTrackingCost) or spec.cost.speed_curve != lwr.speed:
        raise ConfigurationError("cost model does not track the LWR speed curve", key="model")
    if spec.grid != lwr.grid:
        raise ConfigurationError("grids differ", key="grid")
    if np.any(spec.terminal_values != 0.0):
        raise ConfigurationError("terminal cost must vanish", key="terminal_cost")
    if not np.allclose(spec.initial_cells, lwr.rho.values[0], rtol=0.0, atol=1e-14):
        raise ConfigurationError("initial densities differ", key="initial")

    return float(np.max(np.abs(assemble_residual(lwr_unknowns(lwr), spec))))
