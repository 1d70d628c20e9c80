"""The discrete coupled system F(w) = 0 and its sparse Jacobian.

Unknowns are packed into one flat vector ``w`` of length ``3*Nx*Nt + 2*Nx``::

    [ rho^0 .. rho^Nt | u^0 .. u^(Nt-1) | V^0 .. V^Nt ]

each block time-major (level by level, ``Nx`` cells per level). Residual rows
are stacked in the order continuity, HJB value, speed definition, initial
density, terminal value; the first three blocks are ``Nt*Nx`` long and
time-major, the last two are ``Nx`` long.

Continuity uses the conservative Lax-Friedrichs step. The HJB equations use an
upwind difference: with the default ``"upwind"`` stencil the value ``V_j``
sits on the left node of cell ``j`` and reads the gradient across that cell,
``p_j = (V_{j+1} - V_j) / dx``, which lies downstream of the node for
nonnegative speeds. The ``"literal"`` stencil puts ``V_j`` on the right node
and uses ``p_j = (V_j - V_{j-1}) / dx``; its backward march is anti-diffusive.
Every entry point defaults to ``"upwind"``. ``"literal"`` reproduces the
backward difference exactly as the model states it and stays selectable
through ``ProblemSpec.stencil`` (``stencil`` in the configuration).
"""

import functools
import logging
import typing as t

import numpy as np
import pandas as pd
import scipy.sparse as sparse
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass

from .costs import CostModel
from .exceptions import ConfigurationError, DimensionError
from .grid import (
    CSV_FLOAT_FORMAT,
    ScalarField,
    SolutionTriple,
    SpaceTimeGrid,
    cell_averages,
)

logger = logging.getLogger(__name__)

#: Relative slack on ``u_max * dt <= dx``.
CFL_SLACK = 1e-12

STENCIL_OFFSETS = {
    # stencil: (offset of the "hi" node, stagger of V inside the ring)
    "upwind": (1, 0.0),
    "literal": (0, 1.0),
}

RESIDUAL_BLOCKS = ("continuity", "hjb", "speed", "initial", "terminal")


def zero_terminal_cost(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class ProblemSpec:
    """One mean field game on the ring.

    :param grid: The space-time grid.
    :param cost: The running-cost model (carries ``u_max`` and ``rho_jam``).
    :param initial_density: Vectorized ``rho_0(x)``; cell averages are taken
        by Gauss-Legendre quadrature.
    :param terminal_cost: Vectorized ``V_T(x)``.
    :param boundary: Only ``"periodic"``.
    :param stencil: ``"upwind"`` or ``"literal"`` (see module docstring).
    """

    grid: SpaceTimeGrid
    cost: CostModel
    initial_density: t.Callable
    terminal_cost: t.Callable = zero_terminal_cost
    boundary: t.Literal["periodic"] = "periodic"
    stencil: t.Literal["upwind", "literal"] = "upwind"

    def __post_init__(self):
        cells = self.initial_cells
        if not np.all(np.isfinite(cells)):
            raise ConfigurationError("initial density is not finite", key="initial")
        if cells.sum() < 0.0:
            raise ConfigurationError("initial density has negative mass", key="initial")

    @property
    def u_max(self) -> float:
        return self.cost.u_max

    @property
    def value_stagger(self) -> float:
        return STENCIL_OFFSETS[self.stencil][1]

    @functools.cached_property
    def initial_cells(self) -> np.ndarray:
        return cell_averages(self.initial_density, self.grid)

    @functools.cached_property
    def terminal_values(self) -> np.ndarray:
        nodes = self.grid.positions(self.value_stagger)
        return np.asarray(self.terminal_cost(nodes), dtype=float) + np.zeros(self.grid.num_cells)

    def with_grid(self, grid: SpaceTimeGrid) -> "ProblemSpec":
        return ProblemSpec(
            grid=grid,
            cost=self.cost,
            initial_density=self.initial_density,
            terminal_cost=self.terminal_cost,
            boundary=self.boundary,
            stencil=self.stencil,
        )


class CflReport(t.NamedTuple):
    passed: bool
    ratio: float


def check_cfl(spec: ProblemSpec) -> CflReport:
    """Report ``u_max * dt / dx`` and whether it is at most one."""

    grid = spec.grid
    ratio = spec.u_max * grid.dt / grid.dx
    return CflReport(passed=ratio <= 1.0 + CFL_SLACK, ratio=ratio)


def require_cfl(spec: ProblemSpec, *, key="grid") -> None:
    report = check_cfl(spec)
    if not report.passed:
        raise ConfigurationError(
            f"CFL violated on {spec.grid.num_cells}x{spec.grid.num_steps}: "
            f"u_max*dt/dx = {report.ratio:.4g} > 1",
            key=key,
        )


# -- stencils ---------------------------------------------------------------


def _lax_friedrichs(rho, u, ratio):
    flux = rho * u
    neighbours = np.roll(rho, 1, axis=-1) + np.roll(rho, -1, axis=-1)
    return 0.5 * neighbours - 0.5 * ratio * (np.roll(flux, -1, axis=-1) - np.roll(flux, 1, axis=-1))


def _costate(V, dx, stencil):
    hi, _ = STENCIL_OFFSETS[stencil]
    upper = np.roll(V, -hi, axis=-1)
    lower = np.roll(V, 1 - hi, axis=-1)
    return (upper - lower) / dx


def lf_step(rho_level, u_level, grid: SpaceTimeGrid) -> np.ndarray:
    """Advance one density level by the conservative Lax-Friedrichs scheme.

    :raises ConfigurationError: if ``max|u| * dt > dx``.
    """

    rho_level = np.asarray(rho_level, dtype=float)
    u_level = np.asarray(u_level, dtype=float)
    alpha = float(np.max(np.abs(u_level))) if u_level.size else 0.0
    if alpha * grid.dt > grid.dx * (1.0 + CFL_SLACK):
        raise ConfigurationError(
            f"CFL violated: max|u|*dt/dx = {alpha * grid.dt / grid.dx:.4g} > 1", key="grid"
        )
    return _lax_friedrichs(rho_level, u_level, grid.dt / grid.dx)


def hjb_backstep(V_next, rho_level, model: CostModel, grid: SpaceTimeGrid, stencil="upwind"):
    """One backward upwind step of the HJB equations.

    :return: ``(V at level n, u at level n)``.
    """

    V_next = np.asarray(V_next, dtype=float)
    rho_level = np.asarray(rho_level, dtype=float)
    p = _costate(V_next, grid.dx, stencil)
    V = V_next + grid.dt * model.hamiltonian(p, rho_level)
    u = model.optimal_speed(p, rho_level)
    return V, u


# -- packing ----------------------------------------------------------------


class UnknownLayout:
    """Offsets of the density, speed and value blocks inside ``w``."""

    def __init__(self, grid: SpaceTimeGrid):
        nx, nt = grid.num_cells, grid.num_steps
        self.grid = grid
        self.rho = 0
        self.u = (nt + 1) * nx
        self.V = (2 * nt + 1) * nx
        self.size = 3 * nx * nt + 2 * nx

    def split(self, w):
        grid = self.grid
        nx, nt = grid.num_cells, grid.num_steps
        w = np.asarray(w, dtype=float)
        if w.shape != (self.size,):
            raise DimensionError(f"unknown vector has length {w.shape}, expected {self.size}")
        rho = w[self.rho : self.u].reshape(nt + 1, nx)
        u = w[self.u : self.V].reshape(nt, nx)
        V = w[self.V :].reshape(nt + 1, nx)
        return rho, u, V


def pack_arrays(rho, u, V) -> np.ndarray:
    """Pack level arrays (``u`` with ``Nt`` levels) into an unknown vector."""

    return np.concatenate([np.ravel(rho), np.ravel(u), np.ravel(V)]).astype(float)


def pack(triple: SolutionTriple) -> np.ndarray:
    """The unknown vector of a solution; the derived last speed level is dropped."""

    return pack_arrays(triple.rho.values, triple.u.values[:-1], triple.V.values)


def terminal_speed(spec: ProblemSpec, rho_last, V_last) -> np.ndarray:
    """Myopic speed at ``t = T`` against the terminal value gradient."""

    p = _costate(np.asarray(V_last, dtype=float), spec.grid.dx, spec.stencil)
    return spec.cost.optimal_speed(p, rho_last)


def unpack(w, spec: ProblemSpec) -> SolutionTriple:
    """Unpack ``w`` into fields; the speed field's level ``Nt`` is derived."""

    grid = spec.grid
    rho, u, V = UnknownLayout(grid).split(w)
    u_full = np.vstack([u, terminal_speed(spec, rho[-1], V[-1])])
    return SolutionTriple(
        rho=ScalarField(grid, rho, stagger=0.5, name="rho"),
        u=ScalarField(grid, u_full, stagger=0.5, derived_last_level=True, name="u"),
        V=ScalarField(grid, V, stagger=spec.value_stagger, name="V"),
    )


# -- residual and Jacobian --------------------------------------------------


class DiscreteSystem:
    """Residual map and Jacobian of one :class:`ProblemSpec`."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        self.grid = spec.grid
        self.layout = UnknownLayout(spec.grid)
        self._hi = STENCIL_OFFSETS[spec.stencil][0]

    @property
    def size(self) -> int:
        return self.layout.size

    def residual_blocks(self, w) -> t.Dict[str, np.ndarray]:
        grid, spec = self.grid, self.spec
        rho, u, V = self.layout.split(w)

        p = _costate(V[1:], grid.dx, spec.stencil)
        H = spec.cost.hamiltonian(p, rho[:-1])
        alpha = spec.cost.optimal_speed(p, rho[:-1])

        return {
            "continuity": rho[1:] - _lax_friedrichs(rho[:-1], u, grid.dt / grid.dx),
            "hjb": V[:-1] - V[1:] - grid.dt * H,
            "speed": u - alpha,
            "initial": rho[0] - spec.initial_cells,
            "terminal": V[-1] - spec.terminal_values,
        }

    def residual(self, w) -> np.ndarray:
        blocks = self.residual_blocks(w)
        return np.concatenate([np.ravel(blocks[name]) for name in RESIDUAL_BLOCKS])

    @functools.cached_property
    def _index(self):
        nx, nt = self.grid.num_cells, self.grid.num_steps
        n = np.arange(nt)[:, None] + np.zeros((1, nx), dtype=int)
        j = np.arange(nx)[None, :] + np.zeros((nt, 1), dtype=int)
        return n, j

    def _cols(self, block, n, j):
        offset = getattr(self.layout, block)
        return offset + n * self.grid.num_cells + np.mod(j, self.grid.num_cells)

    def jacobian(self, w) -> sparse.csr_matrix:
        """Assemble ``dF/dw`` in CSR format; the sparsity pattern depends only on the grid."""

        grid, spec = self.grid, self.spec
        nx, nt = grid.num_cells, grid.num_steps
        rho, u, V = self.layout.split(w)
        n, j = self._index
        jm, jp = j - 1, j + 1
        hi, lo = j + self._hi, j + self._hi - 1

        c = 0.5 * grid.dt / grid.dx
        rho_n, u_n = rho[:-1], u
        rho_m, rho_p = np.roll(rho_n, 1, axis=1), np.roll(rho_n, -1, axis=1)
        u_m, u_p = np.roll(u_n, 1, axis=1), np.roll(u_n, -1, axis=1)

        p = _costate(V[1:], grid.dx, spec.stencil)
        terms = spec.cost.hamiltonian_terms(p, rho_n)
        ones = np.ones((nt, nx))

        cont = n * nx + j
        hjb = nt * nx + cont
        speed = 2 * nt * nx + cont

        entries = [
            # continuity
            (cont, self._cols("rho", n + 1, j), ones),
            (cont, self._cols("rho", n, jm), -0.5 - c * u_m),
            (cont, self._cols("rho", n, jp), -0.5 + c * u_p),
            (cont, self._cols("u", n, jm), -c * rho_m),
            (cont, self._cols("u", n, jp), c * rho_p),
            # HJB value
            (hjb, self._cols("V", n, j), ones),
            (hjb, self._cols("V", n + 1, j), -ones),
            (hjb, self._cols("V", n + 1, hi), -grid.dt * terms.d_p / grid.dx),
            (hjb, self._cols("V", n + 1, lo), grid.dt * terms.d_p / grid.dx),
            (hjb, self._cols("rho", n, j), -grid.dt * terms.d_rho),
            # speed definition
            (speed, self._cols("u", n, j), ones),
            (speed, self._cols("V", n + 1, hi), -terms.d_pp / grid.dx),
            (speed, self._cols("V", n + 1, lo), terms.d_pp / grid.dx),
            (speed, self._cols("rho", n, j), -terms.d_prho),
        ]

        cells = np.arange(nx)
        boundary = [
            (3 * nt * nx + cells, self._cols("rho", 0, cells), np.ones(nx)),
            (3 * nt * nx + nx + cells, self._cols("V", nt, cells), np.ones(nx)),
        ]

        rows, cols, vals = zip(*(entries + boundary))
        matrix = sparse.coo_matrix(
            (
                np.concatenate([np.ravel(v) for v in vals]),
                (
                    np.concatenate([np.ravel(r) for r in rows]),
                    np.concatenate([np.ravel(k) for k in cols]),
                ),
            ),
            shape=(self.size, self.size),
        )
        return matrix.tocsr()


def assemble_residual(w, spec: ProblemSpec) -> np.ndarray:
    """Evaluate ``F(w)`` (same length as ``w``)."""

    return DiscreteSystem(spec).residual(w)


def assemble_jacobian(w, spec: ProblemSpec) -> sparse.csr_matrix:
    """Evaluate ``dF/dw`` analytically, zero sensitivity on clamped sides."""

    return DiscreteSystem(spec).jacobian(w)


def residual_frame(w, spec: ProblemSpec) -> pd.DataFrame:
    blocks = DiscreteSystem(spec).residual_blocks(w)
    frames = [
        pd.DataFrame({"block": name, "index": np.arange(blocks[name].size), "value": np.ravel(blocks[name])})
        for name in RESIDUAL_BLOCKS
    ]
    return pd.concat(frames, ignore_index=True)


def write_residual_csv(w, spec: ProblemSpec, path) -> None:
    """Debug dump of the residual blocks (``block,index,value``)."""

    residual_frame(w, spec).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


@dataclass(frozen=True)
class GaussianBump:
    """``rho_a + (rho_b - rho_a) * exp(-(x - L/2)^2 / (2 gamma^2))``."""

    rho_a: float
    rho_b: float
    gamma: t.Annotated[float, Field(gt=0)]
    road_length: t.Annotated[float, Field(gt=0)]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - 0.5 * self.road_length) / self.gamma
        return self.rho_a + (self.rho_b - self.rho_a) * np.exp(-0.5 * z**2)
