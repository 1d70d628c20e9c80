"""Space-time discretization of the ring road and scalar fields living on it.

Cells are 0-based: cell ``j`` covers ``[j*dx, (j+1)*dx]`` and index ``j`` wraps
modulo ``num_cells``. Every field stores ``num_steps + 1`` time levels of
``num_cells`` values; where a value sits inside its cell is recorded by the
field's ``stagger`` (0.5 for cell averages, 0.0 or 1.0 for nodes).
"""

import typing as t

import numpy as np
import pandas as pd
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass

from .exceptions import DimensionError, DomainError

#: Relative slack when testing ``0 <= t <= T``.
TIME_SLACK = 1e-12

#: Points per cell used for cell averages of analytic densities.
QUADRATURE_ORDER = 16

CSV_FLOAT_FORMAT = "%.15g"


@dataclass(frozen=True)
class SpaceTimeGrid:
    """A uniform grid on the ring ``[0, L)`` times ``[0, T]``.

    :param road_length: Ring length ``L``.
    :param horizon: Planning horizon ``T``.
    :param num_cells: Number of cells ``Nx`` (at least 2).
    :param num_steps: Number of time steps ``Nt`` (at least 1).
    """

    road_length: t.Annotated[float, Field(gt=0)]
    horizon: t.Annotated[float, Field(gt=0)]
    num_cells: t.Annotated[int, Field(ge=2)]
    num_steps: t.Annotated[int, Field(ge=1)]

    @property
    def dx(self) -> float:
        return self.road_length / self.num_cells

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    @property
    def shape(self) -> t.Tuple[int, int]:
        """Shape ``(Nt + 1, Nx)`` of a stored field."""

        return (self.num_steps + 1, self.num_cells)

    def times(self) -> np.ndarray:
        return np.arange(self.num_steps + 1) * self.dt

    def positions(self, stagger: float = 0.5) -> np.ndarray:
        """Locations ``(j + stagger) * dx`` of the stored values, wrapped into ``[0, L)``."""

        return np.mod((np.arange(self.num_cells) + stagger) * self.dx, self.road_length)

    def cell_centers(self) -> np.ndarray:
        return self.positions(0.5)

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        return SpaceTimeGrid(
            self.road_length,
            self.horizon,
            self.num_cells * factor,
            self.num_steps * factor,
        )

    def coarsened(self, factor: int = 2) -> "SpaceTimeGrid":
        if self.num_cells % factor or self.num_steps % factor:
            raise DimensionError(
                f"grid {self.num_cells}x{self.num_steps} is not divisible by {factor}"
            )
        return SpaceTimeGrid(
            self.road_length,
            self.horizon,
            self.num_cells // factor,
            self.num_steps // factor,
        )

    def is_refinement_of(self, coarse: "SpaceTimeGrid", factor: int = 2) -> bool:
        return (
            self.road_length == coarse.road_length
            and self.horizon == coarse.horizon
            and self.num_cells == factor * coarse.num_cells
            and self.num_steps == factor * coarse.num_steps
        )


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class ScalarField:
    """Values of one quantity on every ``(n, j)`` of a grid.

    The array is copied on construction and made read-only.

    :param grid: The grid the values live on.
    :param values: Array of shape ``(Nt + 1, Nx)``.
    :param stagger: Position of entry ``j`` inside the ring, in units of ``dx``.
    :param derived_last_level: ``True`` when level ``Nt`` is not a solved
        quantity but was filled in afterwards (the speed field).
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    stagger: float = 0.5
    derived_last_level: bool = False
    name: str = "value"

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise DimensionError(
                f"{self.name}: expected shape {self.grid.shape}, got {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid, value, **kwargs):
        return cls(grid, np.full(grid.shape, float(value)), **kwargs)

    def level(self, n: int) -> np.ndarray:
        return self.values[n]

    def positions(self) -> np.ndarray:
        return self.grid.positions(self.stagger)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class SolutionTriple:
    """Density, speed and value fields of one solution.

    ``rho`` and ``u`` are cell averages; ``V`` sits on nodes. The speed field's
    last level is derived (see :attr:`ScalarField.derived_last_level`).
    """

    rho: ScalarField
    u: ScalarField
    V: ScalarField

    def __post_init__(self):
        if not (self.rho.grid == self.u.grid == self.V.grid):
            raise DimensionError("density, speed and value fields live on different grids")

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.rho.grid

    def within_bounds(self, u_max: float, slack: float = 1e-12) -> bool:
        u = self.u.values
        return bool(
            np.all(self.rho.values >= -slack)
            and np.all(u >= -slack)
            and np.all(u <= u_max + slack)
        )

    def fields(self) -> t.Dict[str, ScalarField]:
        return {"rho": self.rho, "u": self.u, "V": self.V}


def _time_weights(grid, t_query):
    s = np.clip(t_query / grid.dt, 0.0, grid.num_steps)
    n0 = np.minimum(np.floor(s).astype(int), grid.num_steps - 1)
    return n0, s - n0


def _space_weights(grid, x_query, stagger):
    xi = np.mod(x_query, grid.road_length) / grid.dx - stagger
    j0 = np.floor(xi).astype(int)
    wx = xi - j0
    j0 = np.mod(j0, grid.num_cells)
    return j0, np.mod(j0 + 1, grid.num_cells), wx


def interpolate_space_time(field: ScalarField, x, t_query):
    """Bilinear interpolation of ``field`` at ``(x, t)``, periodic in ``x``.

    ``x`` and ``t`` broadcast against each other; scalar inputs give a float.

    :raises DomainError: if any ``t`` lies outside ``[0, T]``.
    """

    grid = field.grid
    x = np.asarray(x, dtype=float)
    t_query = np.asarray(t_query, dtype=float)

    slack = TIME_SLACK * max(grid.horizon, 1.0)
    if np.any(t_query < -slack) or np.any(t_query > grid.horizon + slack):
        raise DomainError(f"time outside [0, {grid.horizon}]")

    x, t_query = np.broadcast_arrays(x, t_query)
    n0, wt = _time_weights(grid, t_query)
    j0, j1, wx = _space_weights(grid, x, field.stagger)

    v = field.values
    lower = (1.0 - wx) * v[n0, j0] + wx * v[n0, j1]
    upper = (1.0 - wx) * v[n0 + 1, j0] + wx * v[n0 + 1, j1]
    result = (1.0 - wt) * lower + wt * upper
    return result.item() if result.ndim == 0 else result


def interpolate_level(values: np.ndarray, grid: SpaceTimeGrid, x, stagger: float = 0.5):
    """Linear periodic interpolation of one time level at positions ``x``."""

    j0, j1, wx = _space_weights(grid, np.asarray(x, dtype=float), stagger)
    return (1.0 - wx) * values[j0] + wx * values[j1]


def l1_norm(field_a: ScalarField, field_b: ScalarField) -> float:
    """Discrete L1 distance on ``[0, L] x [0, T]``.

    Every one of the ``Nt + 1`` levels carries the same weight ``dt``, so a
    constant difference ``c`` gives ``c * L * T * (Nt + 1) / Nt``.

    :raises DimensionError: if the fields live on different grids.
    """

    if field_a.grid != field_b.grid:
        raise DimensionError("fields live on different grids")
    grid = field_a.grid
    diff = np.abs(field_a.values - field_b.values)
    return float(diff.sum() * grid.dx * grid.dt)


def cell_averages(func, grid: SpaceTimeGrid, order: int = QUADRATURE_ORDER) -> np.ndarray:
    """Cell averages ``(1/dx) * integral of func over each cell`` by Gauss-Legendre quadrature.

    ``func`` must accept and return numpy arrays.
    """

    nodes, weights = np.polynomial.legendre.leggauss(order)
    left = np.arange(grid.num_cells)[:, None] * grid.dx
    points = left + 0.5 * (nodes[None, :] + 1.0) * grid.dx
    samples = np.asarray(func(points), dtype=float)
    return 0.5 * samples @ weights


def total_variation(values: np.ndarray) -> float:
    """Periodic total variation of one level."""

    return float(np.abs(np.roll(values, -1) - values).sum())


def max_gradient(values: np.ndarray, dx: float) -> float:
    return float(np.abs(np.roll(values, -1) - values).max() / dx)


def field_frame(field: ScalarField) -> pd.DataFrame:
    """Rows ``t, x, value`` ordered by time level, then by cell."""

    grid = field.grid
    times, positions = np.meshgrid(grid.times(), field.positions(), indexing="ij")
    return pd.DataFrame(
        {
            "t": times.ravel(),
            "x": positions.ravel(),
            "value": field.values.ravel(),
        }
    )


def write_field_csv(field: ScalarField, path) -> None:
    field_frame(field).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def write_field_gnuplot(field: ScalarField, path) -> None:
    """Whitespace-separated ``t x value`` blocks, one per time level."""

    frame = field_frame(field)
    with open(path, "w") as f:
        f.write(f"# {field.name}: t x value\n")
        for _, block in frame.groupby("t", sort=True):
            f.write(block.to_csv(sep=" ", header=False, index=False, float_format=CSV_FLOAT_FORMAT))
            f.write("\n")
