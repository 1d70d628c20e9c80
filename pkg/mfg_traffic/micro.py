"""The N-car game: kernel-smoothed density, MFE-constructed controls and their accuracy.

Each car ``i`` follows ``x_i' = v_i`` with ``0 <= v_i <= u_max`` and pays

    J_i = sum_n f(v_i^n, rho_hat(x_i^n, t^n)) * dt + V_T(x_i^Nt)

(left-endpoint quadrature), where ``rho_hat = m * sum_j xi(x - x_j)`` is the
density of kernels of mass ``m`` carried by every car. Controls constructed
from a mean field equilibrium are compared against each car's best response
to the others; the gap is the car's accuracy ``eps_i``.
"""

import logging
import math
import typing as t

import numpy as np
import pandas as pd
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass
from scipy.integrate import cumulative_trapezoid

from .costs import CostModel
from .discretization import STENCIL_OFFSETS, hjb_backstep, zero_terminal_cost
from .exceptions import ConfigurationError, DimensionError
from .grid import (
    CSV_FLOAT_FORMAT,
    SolutionTriple,
    SpaceTimeGrid,
    interpolate_level,
    interpolate_space_time,
)

logger = logging.getLogger(__name__)

#: Periodic images summed on each side of the ring.
KERNEL_IMAGES = 2

#: Points used to tabulate the CDF of an initial density.
CDF_RESOLUTION = 4096

DENSITY_CONVENTIONS = ("count", "fraction", "matched")


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel of width ``sigma``, periodized on a ring."""

    width: t.Annotated[float, Field(gt=0)]
    shape: t.Literal["gaussian"] = "gaussian"

    def __call__(self, d, road_length: float):
        d = np.mod(np.asarray(d, dtype=float) + 0.5 * road_length, road_length) - 0.5 * road_length
        norm = 1.0 / (math.sqrt(2.0 * math.pi) * self.width)
        total = np.zeros_like(d)
        for k in range(-KERNEL_IMAGES, KERNEL_IMAGES + 1):
            total += np.exp(-0.5 * ((d + k * road_length) / self.width) ** 2)
        return norm * total

    def peak(self, road_length: float) -> float:
        """``xi(0)``, the kernel's own contribution at its center."""

        return float(self(0.0, road_length))


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class CarEnsemble:
    """Initial positions of ``N`` cars on a ring and the kernel they carry.

    :param positions: Initial positions, wrapped into ``[0, L)``.
    :param road_length: Ring length ``L``.
    :param kernel: Smoothing kernel.
    :param car_mass: Mass ``m`` of each car's kernel.
    :param include_self: Whether a car's own kernel counts in the density it pays against.
    """

    positions: np.ndarray
    road_length: t.Annotated[float, Field(gt=0)]
    kernel: KernelSpec
    car_mass: t.Annotated[float, Field(gt=0)] = 1.0
    include_self: bool = True

    def __post_init__(self):
        positions = np.mod(np.array(self.positions, dtype=float).ravel(), self.road_length)
        if positions.size < 1:
            raise ConfigurationError("at least one car is required", key="micro.num_cars")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    @property
    def num_cars(self) -> int:
        return self.positions.size

    def self_density(self) -> float:
        return self.car_mass * self.kernel.peak(self.road_length) if self.include_self else 0.0

    def initial_density(self, x) -> np.ndarray:
        """Smoothed density of the initial positions at points ``x``."""

        return smooth_density(self, self.positions, x)


def car_mass_for(convention: str, num_cars: int, initial_mass: float = 1.0) -> float:
    """Kernel mass per car: ``count`` 1, ``fraction`` 1/N, ``matched`` total initial mass / N."""

    if convention == "count":
        return 1.0
    if convention == "fraction":
        return 1.0 / num_cars
    if convention == "matched":
        return initial_mass / num_cars
    raise ConfigurationError(
        f"unknown density convention {convention!r}; expected one of {DENSITY_CONVENTIONS}",
        key="micro.density_convention",
    )


def smooth_density(ensemble: CarEnsemble, positions, x) -> np.ndarray:
    """``m * sum_j xi(x - x_j)`` at points ``x``.

    ``positions`` is ``(N,)`` for one time level or ``(levels, N)``; the result
    is ``x``-shaped or ``(levels, len(x))`` respectively.
    """

    positions = np.asarray(positions, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x[..., :, None] - positions[..., None, :]
    return ensemble.car_mass * ensemble.kernel(d, ensemble.road_length).sum(axis=-1)


def sample_initial_positions(
    num_cars: int,
    density,
    road_length: float,
    mode: str = "quantile",
    seed: t.Optional[int] = None,
) -> np.ndarray:
    """Place cars according to a density on ``[0, L]``.

    ``quantile`` puts car ``i`` at the ``(i - 1/2)/N`` quantile; ``seeded``
    draws i.i.d. samples from ``numpy.random.default_rng(seed)``.

    :raises ConfigurationError: if the density has no positive mass.
    """

    if num_cars < 1:
        raise ConfigurationError("at least one car is required", key="micro.num_cars")
    x = np.linspace(0.0, road_length, CDF_RESOLUTION + 1)
    cdf = cumulative_trapezoid(np.asarray(density(x), dtype=float), x, initial=0.0)
    total = cdf[-1]
    if not total > 0.0:
        raise ConfigurationError("initial density has no positive mass", key="initial")

    if mode == "quantile":
        levels = (np.arange(num_cars) + 0.5) / num_cars
    elif mode == "seeded":
        levels = np.sort(np.random.default_rng(seed).random(num_cars))
    else:
        raise ConfigurationError(f"unknown sampling mode {mode!r}", key="micro.sampling")

    return np.mod(np.interp(levels * total, cdf, x), road_length)


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class ControlSet:
    """Speeds ``(Nt, N)`` and positions ``(Nt + 1, N)`` of every car on the time levels.

    Positions follow explicit Euler: ``x^{n+1} = x^n + dt * v^n (mod L)``.
    """

    grid: SpaceTimeGrid
    speeds: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        speeds = np.array(self.speeds, dtype=float)
        positions = np.array(self.positions, dtype=float)
        nt = self.grid.num_steps
        if speeds.ndim != 2 or speeds.shape[0] != nt or positions.shape != (nt + 1, speeds.shape[1]):
            raise DimensionError(
                f"controls need speeds (Nt, N) and positions (Nt + 1, N); got {speeds.shape}, {positions.shape}"
            )
        for name, value in (("speeds", speeds), ("positions", positions)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_cars(self) -> int:
        return self.speeds.shape[1]

    @classmethod
    def from_speeds(cls, grid: SpaceTimeGrid, initial_positions, speeds) -> "ControlSet":
        speeds = np.asarray(speeds, dtype=float)
        return cls(grid, speeds, track(grid, initial_positions, speeds))


def track(grid: SpaceTimeGrid, initial_positions, speeds) -> np.ndarray:
    """Euler trajectories ``(Nt + 1, ...)`` from speeds ``(Nt, ...)``."""

    speeds = np.asarray(speeds, dtype=float)
    x0 = np.mod(np.asarray(initial_positions, dtype=float), grid.road_length)
    steps = np.concatenate([np.zeros((1,) + speeds.shape[1:]), np.cumsum(speeds * grid.dt, axis=0)])
    return np.mod(x0 + steps, grid.road_length)


def construct_controls(mfe: SolutionTriple, ensemble: CarEnsemble) -> ControlSet:
    """Let every car follow the equilibrium speed field: ``v_i(t) = u*(x_i(t), t)``."""

    grid = mfe.grid
    if not math.isclose(grid.road_length, ensemble.road_length):
        raise ConfigurationError("equilibrium and cars live on different rings", key="road.length")

    times = grid.times()
    positions = np.empty((grid.num_steps + 1, ensemble.num_cars))
    speeds = np.empty((grid.num_steps, ensemble.num_cars))
    positions[0] = ensemble.positions
    for n in range(grid.num_steps):
        speeds[n] = interpolate_space_time(mfe.u, positions[n], times[n])
        positions[n + 1] = np.mod(positions[n] + grid.dt * speeds[n], grid.road_length)
    return ControlSet(grid, speeds, positions)


# -- costs ------------------------------------------------------------------


def trajectory_cost(
    own_positions,
    own_speeds,
    others_positions,
    ensemble: CarEnsemble,
    model: CostModel,
    grid: SpaceTimeGrid,
    terminal_cost=zero_terminal_cost,
) -> float:
    """Cost of one car's path against the other cars' positions ``(Nt + 1, N - 1)``."""

    own_positions = np.asarray(own_positions, dtype=float)
    others = np.asarray(others_positions, dtype=float)
    d = own_positions[:-1, None] - others[:-1]
    rho = ensemble.car_mass * ensemble.kernel(d, ensemble.road_length).sum(axis=1)
    rho = rho + ensemble.self_density()
    running = model.running_cost(np.asarray(own_speeds, dtype=float), rho)
    terminal = float(np.asarray(terminal_cost(own_positions[-1]), dtype=float))
    return float(running.sum() * grid.dt + terminal)


def driving_costs(
    controls: ControlSet, ensemble: CarEnsemble, model: CostModel, terminal_cost=zero_terminal_cost
) -> np.ndarray:
    """``J_i`` for every car under ``controls``."""

    positions = controls.positions
    d = positions[:-1, :, None] - positions[:-1, None, :]
    rho = ensemble.car_mass * ensemble.kernel(d, ensemble.road_length).sum(axis=2)
    if not ensemble.include_self:
        rho = rho - ensemble.car_mass * ensemble.kernel.peak(ensemble.road_length)
    running = model.running_cost(controls.speeds, rho).sum(axis=0) * controls.grid.dt
    return running + np.asarray(terminal_cost(positions[-1]), dtype=float)


def driving_cost(
    i: int,
    controls: ControlSet,
    ensemble: CarEnsemble,
    model: CostModel,
    terminal_cost=zero_terminal_cost,
) -> float:
    """``J_i`` of car ``i`` under ``controls``."""

    others = np.delete(controls.positions, i, axis=1)
    return trajectory_cost(
        controls.positions[:, i],
        controls.speeds[:, i],
        others,
        ensemble,
        model,
        controls.grid,
        terminal_cost,
    )


# -- best response ----------------------------------------------------------


class BestResponse(t.NamedTuple):
    speeds: np.ndarray
    positions: np.ndarray
    cost: float
    dp_improved: bool


def frozen_density(controls: ControlSet, ensemble: CarEnsemble, grid: SpaceTimeGrid) -> np.ndarray:
    """Smoothed density of all cars on the cell centers of ``grid``, ``(Nt + 1, Nx)``."""

    return smooth_density(ensemble, controls.positions, grid.cell_centers())


def _require_same_clock(controls: ControlSet, grid: SpaceTimeGrid):
    if (
        grid.num_steps != controls.grid.num_steps
        or not math.isclose(grid.horizon, controls.grid.horizon)
        or not math.isclose(grid.road_length, controls.grid.road_length)
    ):
        raise ConfigurationError("best-response grid must share the controls' ring and time levels", key="grid")


def best_response(
    i: int,
    controls: ControlSet,
    ensemble: CarEnsemble,
    model: CostModel,
    grid: SpaceTimeGrid,
    terminal_cost=zero_terminal_cost,
    *,
    guard_incumbent: bool = True,
    stencil: str = "upwind",
    density: t.Optional[np.ndarray] = None,
) -> BestResponse:
    """Car ``i``'s optimal reply to the other cars' fixed trajectories.

    The density the car pays against is frozen on the cells of ``grid``; a
    backward sweep of the HJB step gives its optimal speed table, which is
    tracked forward from the car's initial position. With
    ``guard_incumbent`` the cheaper of that path and the car's own current
    control is returned.

    :param density: Precomputed :func:`frozen_density` of all cars.
    """

    _require_same_clock(controls, grid)
    if density is None:
        density = frozen_density(controls, ensemble, grid)

    centers = grid.cell_centers()
    own = controls.positions[:, i]
    others = np.delete(controls.positions, i, axis=1)
    rho = density - smooth_density(ensemble, own[:, None], centers) + ensemble.self_density()

    stagger = STENCIL_OFFSETS[stencil][1]
    V = np.asarray(terminal_cost(grid.positions(stagger)), dtype=float) + np.zeros(grid.num_cells)
    table = np.empty((grid.num_steps, grid.num_cells))
    for n in reversed(range(grid.num_steps)):
        V, table[n] = hjb_backstep(V, rho[n], model, grid, stencil)

    positions = np.empty(grid.num_steps + 1)
    speeds = np.empty(grid.num_steps)
    positions[0] = own[0]
    for n in range(grid.num_steps):
        speeds[n] = interpolate_level(table[n], grid, positions[n])
        positions[n + 1] = np.mod(positions[n] + grid.dt * speeds[n], grid.road_length)
    speeds = np.clip(speeds, 0.0, model.u_max)
    cost = trajectory_cost(positions, speeds, others, ensemble, model, grid, terminal_cost)

    if guard_incumbent:
        incumbent = trajectory_cost(own, controls.speeds[:, i], others, ensemble, model, grid, terminal_cost)
        if incumbent <= cost:
            return BestResponse(controls.speeds[:, i].copy(), own.copy(), incumbent, False)
    return BestResponse(speeds, positions, cost, True)


# -- accuracy ---------------------------------------------------------------


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class AccuracyReport:
    """Per-car accuracies and their relative summaries.

    ``max_ra`` and ``mean_ra`` are NaN when every constructed cost is zero;
    ``relative_defined`` records which case applies.
    """

    cost_constructed: np.ndarray
    cost_best_response: np.ndarray
    epsilon: np.ndarray
    dp_improved: np.ndarray
    max_ra: float
    mean_ra: float
    relative_defined: bool

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "car_index": np.arange(self.epsilon.size),
                "cost_constructed": self.cost_constructed,
                "cost_best_response": self.cost_best_response,
                "epsilon": self.epsilon,
            }
        )

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def epsilon_accuracy(
    controls: ControlSet,
    ensemble: CarEnsemble,
    model: CostModel,
    grid: SpaceTimeGrid,
    terminal_cost=zero_terminal_cost,
    *,
    guard_incumbent: bool = True,
    stencil: str = "upwind",
) -> AccuracyReport:
    """Compare every car's constructed control against its best response."""

    _require_same_clock(controls, grid)
    constructed = driving_costs(controls, ensemble, model, terminal_cost)
    density = frozen_density(controls, ensemble, grid)

    best = np.empty(controls.num_cars)
    improved = np.zeros(controls.num_cars, dtype=bool)
    for i in range(controls.num_cars):
        reply = best_response(
            i,
            controls,
            ensemble,
            model,
            grid,
            terminal_cost,
            guard_incumbent=guard_incumbent,
            stencil=stencil,
            density=density,
        )
        best[i], improved[i] = reply.cost, reply.dp_improved

    epsilon = constructed - best
    scale_max = float(np.max(np.abs(constructed)))
    scale_mean = float(np.mean(np.abs(constructed)))
    relative_defined = scale_max > 0.0
    if not relative_defined:
        logger.warning("all constructed costs vanish; relative accuracies are undefined")

    report = AccuracyReport(
        cost_constructed=constructed,
        cost_best_response=best,
        epsilon=epsilon,
        dp_improved=improved,
        max_ra=float(np.max(epsilon)) / scale_max if relative_defined else math.nan,
        mean_ra=float(np.mean(epsilon)) / scale_mean if relative_defined else math.nan,
        relative_defined=relative_defined,
    )
    logger.info(
        "N=%d: MaxRA %.4g, MeanRA %.4g, DP improved %d cars",
        controls.num_cars,
        report.max_ra,
        report.mean_ra,
        int(improved.sum()),
    )
    return report
