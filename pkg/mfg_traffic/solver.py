"""Newton-Krylov solution of the discrete mean field game.

Newton's method drives ``F(w) = 0``; each Newton system is solved by
restarted GMRES, preconditioned by a forward (density) sweep followed by a
backward (value, speed) sweep. The decoupled variant drops both blocks
coupling the sweeps; the Gauss-Seidel variant, the default, lets the
backward sweep see the density update. GMRES that stalls hands the system
to a sparse LU whose factor then preconditions the next Newton systems.
Initial guesses for fine grids come from solutions on coarser grids (nested
iteration).
"""

import logging
import math
import time
import typing as t

import numpy as np
import pandas as pd
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass

from .discretization import (
    DiscreteSystem,
    ProblemSpec,
    UnknownLayout,
    pack_arrays,
    require_cfl,
    unpack,
)
from .exceptions import (
    ConfigurationError,
    DimensionError,
    LinearSolverError,
    NonConvergenceError,
    PreconditionerError,
)
from .grid import CSV_FLOAT_FORMAT, ScalarField, SolutionTriple, SpaceTimeGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class SolverConfig:
    """Tolerances and iteration budgets of the Newton-Krylov solver.

    :param newton_tol: Stop when ``max|F(w)| <= newton_tol``; zero never stops.
    :param max_newton: Newton iterations per grid level.
    :param gmres_rtol: Relative tolerance of each GMRES solve.
    :param gmres_restart: GMRES restart length.
    :param gmres_maxiter: Total inner GMRES iterations per Newton system.
    :param coarsest_nx: Cells on the coarsest multigrid level.
    :param refinement: Refinement factor between levels (only 2).
    :param damping: Step lengths tried by the line search, in order.
    :param line_search: ``False`` takes full Newton steps.
    :param preconditioned: Precondition GMRES with a time sweep.
    :param preconditioner: ``gauss-seidel`` keeps the density coupling of
        the backward rows; ``decoupled`` drops it.
    :param direct_fallback: Fall back to a sparse LU solve when GMRES
        exhausts its budget or gives up.
    :param gmres_fail_fast: Give up on GMRES once a restart cycle stalls or
        the observed rate projects past twice the budget.
    :param gmres_stagnation: Cycle residual ratio counted as a stall.
    :param reuse_factor: Keep the LU factor of a fallback as the
        preconditioner for the remaining Newton systems of the level.
    :param negative_density_slack: Negative densities above ``-slack`` at the
        solution are truncated to zero.
    """

    newton_tol: t.Annotated[float, Field(ge=0)] = 1e-9
    max_newton: t.Annotated[int, Field(ge=1)] = 50
    gmres_rtol: t.Annotated[float, Field(gt=0)] = 1e-8
    gmres_restart: t.Annotated[int, Field(ge=1)] = 60
    gmres_maxiter: t.Annotated[int, Field(ge=1)] = 2000
    coarsest_nx: t.Annotated[int, Field(ge=4)] = 15
    refinement: t.Literal[2] = 2
    damping: t.Tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    line_search: bool = True
    preconditioned: bool = True
    preconditioner: t.Literal["gauss-seidel", "decoupled"] = "gauss-seidel"
    direct_fallback: bool = True
    gmres_fail_fast: bool = True
    gmres_stagnation: t.Annotated[float, Field(gt=0, le=1)] = 0.99
    reuse_factor: bool = True
    negative_density_slack: t.Annotated[float, Field(ge=0)] = 1e-10

    def __post_init__(self):
        if not self.damping or any(not 0.0 < d <= 1.0 for d in self.damping):
            raise ConfigurationError("damping factors must lie in (0, 1]", key="solver.damping")


@dataclass
class LevelReport:
    level: int
    num_cells: int
    num_steps: int
    newton_iters: int = 0
    gmres_iters: int = 0
    final_residual: float = math.inf
    seconds: float = 0.0
    direct_solves: int = 0


@dataclass
class SolveReport:
    """Per-level iteration counts, residuals and timings of one solve."""

    levels: t.List[LevelReport] = Field(default_factory=list)

    @property
    def newton_iters(self) -> t.List[int]:
        return [level.newton_iters for level in self.levels]

    @property
    def gmres_iters(self) -> int:
        return sum(level.gmres_iters for level in self.levels)

    @property
    def final_residual(self) -> float:
        return self.levels[-1].final_residual if self.levels else math.inf

    @property
    def direct_solves(self) -> int:
        return sum(level.direct_solves for level in self.levels)

    @property
    def wall_time(self) -> float:
        return sum(level.seconds for level in self.levels)

    def extend(self, other: "SolveReport") -> None:
        self.levels.extend(other.levels)

    def to_frame(self) -> pd.DataFrame:
        columns = ["level", "newton_iters", "gmres_iters", "final_residual", "seconds"]
        return pd.DataFrame(
            [[getattr(level, name) for name in columns] for level in self.levels], columns=columns
        )

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


# -- preconditioner ---------------------------------------------------------


def _factor(block, what):
    try:
        return spla.splu(sparse.csc_matrix(block))
    except RuntimeError as exc:
        raise PreconditionerError(f"singular {what} block: {exc}") from exc


class DecoupledPreconditioner:
    """Inverse of the Jacobian with the forward/backward coupling blocks removed.

    The continuity and initial rows restricted to the density columns form a
    block lower-bidiagonal system in time, solved by forward substitution.
    The terminal, HJB and speed rows restricted to the value and speed
    columns form a block upper-bidiagonal system, solved backward from
    ``t = T``; each step factors one ``2*Nx`` square block.

    :raises PreconditionerError: if a diagonal block is singular.
    """

    def __init__(self, jacobian, grid: SpaceTimeGrid):
        J = sparse.csr_matrix(jacobian)
        layout = UnknownLayout(grid)
        nx, nt = grid.num_cells, grid.num_steps
        if J.shape != (layout.size, layout.size):
            raise DimensionError(f"Jacobian shape {J.shape} does not match the grid")

        self.grid = grid
        self.layout = layout
        self.jacobian = J

        def rows(block_start, n):
            return np.arange(block_start + n * nx, block_start + (n + 1) * nx)

        def rho_cols(n):
            return rows(layout.rho, n)

        def u_cols(n):
            return rows(layout.u, n)

        def V_cols(n):
            return rows(layout.V, n)

        initial_rows = rows(3 * nt * nx, 0)
        terminal_rows = rows(3 * nt * nx, 1)

        self._rho_rows = [initial_rows] + [rows(0, n) for n in range(nt)]
        self._rho_diag = [_factor(J[initial_rows][:, rho_cols(0)], "initial density")]
        self._rho_coupling = []
        for n in range(nt):
            block = J[rows(0, n)]
            self._rho_diag.append(_factor(block[:, rho_cols(n + 1)], f"continuity level {n}"))
            self._rho_coupling.append(block[:, rho_cols(n)])

        self._terminal_rows = terminal_rows
        self._terminal = _factor(J[terminal_rows][:, V_cols(nt)], "terminal value")
        self._back_rows = []
        self._back_diag = []
        self._back_coupling = []
        for n in range(nt):
            level_rows = np.concatenate([rows(nt * nx, n), rows(2 * nt * nx, n)])
            block = J[level_rows]
            self._back_rows.append(level_rows)
            self._back_diag.append(
                _factor(block[:, np.concatenate([V_cols(n), u_cols(n)])], f"HJB level {n}")
            )
            self._back_coupling.append(block[:, V_cols(n + 1)])

        self._rho_cols = rho_cols
        self._u_cols = u_cols
        self._V_cols = V_cols

    @property
    def shape(self) -> t.Tuple[int, int]:
        return (self.layout.size, self.layout.size)

    def _sweep_density(self, r, x) -> None:
        """Forward in time over the initial and continuity rows."""

        x[self._rho_cols(0)] = self._rho_diag[0].solve(r[self._rho_rows[0]])
        for n in range(self.grid.num_steps):
            rhs = r[self._rho_rows[n + 1]] - self._rho_coupling[n] @ x[self._rho_cols(n)]
            x[self._rho_cols(n + 1)] = self._rho_diag[n + 1].solve(rhs)

    def _sweep_value(self, r, x) -> None:
        """Backward in time over the terminal, HJB and speed rows."""

        nx, nt = self.grid.num_cells, self.grid.num_steps
        x[self._V_cols(nt)] = self._terminal.solve(r[self._terminal_rows])
        for n in reversed(range(nt)):
            rhs = r[self._back_rows[n]] - self._back_coupling[n] @ x[self._V_cols(n + 1)]
            level = self._back_diag[n].solve(rhs)
            x[self._V_cols(n)] = level[:nx]
            x[self._u_cols(n)] = level[nx:]

    def solve(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float).ravel()
        x = np.zeros_like(r)
        self._sweep_density(r, x)
        self._sweep_value(r, x)
        return x

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(self.shape, matvec=self.solve, dtype=float)


class GaussSeidelPreconditioner(DecoupledPreconditioner):
    """Block Gauss-Seidel sweep: density forward, then value and speed backward.

    Inverts the Jacobian without the speed columns of the continuity rows.
    The HJB and speed rows keep their density dependence, so the backward
    sweep runs on the residual corrected by the density just computed.
    """

    def __init__(self, jacobian, grid: SpaceTimeGrid):
        super().__init__(jacobian, grid)
        nx, nt = grid.num_cells, grid.num_steps
        self._backward = slice(nt * nx, 3 * nt * nx)
        self._density_coupling = self.jacobian[self._backward, : self.layout.u]

    def solve(self, r) -> np.ndarray:
        r = np.array(r, dtype=float).ravel()
        x = np.zeros_like(r)
        self._sweep_density(r, x)
        r[self._backward] -= self._density_coupling @ x[: self.layout.u]
        self._sweep_value(r, x)
        return x


PRECONDITIONERS = {
    "decoupled": DecoupledPreconditioner,
    "gauss-seidel": GaussSeidelPreconditioner,
}


def apply_preconditioner(jacobian, r, grid: SpaceTimeGrid, kind: str = "decoupled") -> np.ndarray:
    """Return ``J~^-1 r`` for the block approximation ``J~`` of ``jacobian``.

    :param kind: ``decoupled`` or ``gauss-seidel``.
    """

    try:
        preconditioner = PRECONDITIONERS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown preconditioner {kind!r}", key="solver.preconditioner") from None
    return preconditioner(jacobian, grid).solve(r)


# -- Newton -----------------------------------------------------------------


class KrylovSolver:
    """Restarted GMRES for the Newton systems of one grid level.

    GMRES runs one restart cycle at a time. With ``gmres_fail_fast`` it gives
    up once a cycle stalls or the observed rate cannot reach the tolerance
    within twice the budget. A system GMRES gives up on is solved by sparse
    LU; with ``reuse_factor`` that factor preconditions the later systems of
    the level until it stalls too, which triggers a fresh factorization.
    """

    def __init__(self, grid: SpaceTimeGrid, cfg: SolverConfig):
        self.grid = grid
        self.cfg = cfg
        self._factor = None

    @property
    def has_factor(self) -> bool:
        return self._factor is not None

    def _preconditioner(self, J):
        if self._factor is not None:
            return spla.LinearOperator(J.shape, matvec=self._factor.solve, dtype=float)
        if not self.cfg.preconditioned:
            return None
        try:
            return PRECONDITIONERS[self.cfg.preconditioner](J, self.grid).as_operator()
        except PreconditionerError as exc:
            logger.warning("%s; continuing with unpreconditioned GMRES", exc)
            return None

    def _hopeless(self, history, cycle, cycles, target) -> bool:
        rate = history[-1] / history[-2]
        if rate >= self.cfg.gmres_stagnation:
            return True
        remaining = math.log(target / history[-1]) / math.log(rate)
        return cycle + remaining > 2 * cycles

    def gmres(self, J, rhs, M=None) -> t.Tuple[np.ndarray, int, bool]:
        """Run GMRES cycle by cycle; return the iterate, inner iterations and success."""

        cfg = self.cfg
        cycles = max(1, math.ceil(cfg.gmres_maxiter / cfg.gmres_restart))
        history = [float(np.linalg.norm(rhs))]
        step = np.zeros_like(rhs)
        if history[0] == 0.0:
            return step, 0, True
        target = cfg.gmres_rtol * history[0]
        iterations = 0

        def count(_):
            nonlocal iterations
            iterations += 1

        for cycle in range(1, cycles + 1):
            step, info = spla.gmres(
                J,
                rhs,
                x0=step,
                rtol=cfg.gmres_rtol,
                atol=0.0,
                restart=cfg.gmres_restart,
                maxiter=1,
                M=M,
                callback=count,
                callback_type="pr_norm",
            )
            if info < 0:
                raise LinearSolverError(f"GMRES breakdown (info={info})")
            history.append(float(np.linalg.norm(rhs - J @ step)))
            if info == 0 or history[-1] <= target:
                return step, iterations, True
            if cfg.gmres_fail_fast and cycle >= 2 and self._hopeless(history, cycle, cycles, target):
                logger.info(
                    "GMRES gives up after %d cycles at relative residual %.3g",
                    cycle,
                    history[-1] / history[0],
                )
                break
        return step, iterations, False

    def solve(self, J, rhs) -> t.Tuple[np.ndarray, int, bool]:
        """Solve ``J x = rhs``; return ``x``, GMRES iterations and whether LU was used.

        :raises LinearSolverError: when GMRES fails without a direct
            fallback, or the system is singular.
        """

        rhs = np.asarray(rhs, dtype=float)
        step, iterations, converged = self.gmres(J, rhs, self._preconditioner(J))
        if converged:
            return step, iterations, False

        if self._factor is not None:
            logger.info("reused LU preconditioner went stale after %d iterations", iterations)
        else:
            logger.warning("GMRES did not reach rtol=%g in %d iterations", self.cfg.gmres_rtol, iterations)
        if not self.cfg.direct_fallback:
            raise LinearSolverError(f"GMRES did not converge in {iterations} iterations")

        try:
            factor = spla.splu(sparse.csc_matrix(J))
        except RuntimeError as exc:
            raise LinearSolverError(f"singular Newton system: {exc}") from exc
        step = factor.solve(rhs)
        if not np.all(np.isfinite(step)):
            raise LinearSolverError("singular Newton system")
        if self.cfg.reuse_factor:
            self._factor = factor
        return step, iterations, True


def _finalize(w, spec: ProblemSpec, cfg: SolverConfig) -> SolutionTriple:
    w = np.array(w, dtype=float)
    rho, u, _ = UnknownLayout(spec.grid).split(w)

    lowest = float(rho.min())
    if lowest < -cfg.negative_density_slack:
        logger.warning("solution density reaches %.3g", lowest)
    elif lowest < 0.0:
        logger.info("truncating negative densities down to %.3g", lowest)
    rho[(rho < 0.0) & (rho >= -cfg.negative_density_slack)] = 0.0
    np.clip(u, 0.0, spec.u_max, out=u)

    return unpack(w, spec)


def newton_solve(
    spec: ProblemSpec, w0, cfg: t.Optional[SolverConfig] = None, *, level: int = 0
) -> t.Tuple[SolutionTriple, SolveReport]:
    """Solve the discrete system on one grid by Newton's method.

    :param spec: The problem.
    :param w0: Initial unknown vector.
    :param cfg: Solver settings; defaults when omitted.
    :param level: Grid level reported in logs and errors.
    :return: The unpacked solution and its report.
    :raises NonConvergenceError: after ``max_newton`` iterations above
        tolerance, or when the line search cannot reduce the residual.
    :raises LinearSolverError: if a Newton system cannot be solved.
    """

    cfg = cfg or SolverConfig()
    require_cfl(spec)
    system = DiscreteSystem(spec)
    grid = spec.grid

    w = np.array(w0, dtype=float)
    if w.shape != (system.size,):
        raise DimensionError(f"initial guess has length {w.shape}, expected {system.size}")

    report = LevelReport(level=level, num_cells=grid.num_cells, num_steps=grid.num_steps)
    krylov = KrylovSolver(grid, cfg)
    started = time.perf_counter()

    F = system.residual(w)
    norm = float(np.max(np.abs(F)))
    best_w, best_norm = w.copy(), norm

    def give_up(message):
        report.final_residual = best_norm
        report.seconds = time.perf_counter() - started
        raise NonConvergenceError(
            message,
            best_iterate=unpack(best_w, spec),
            best_residual=best_norm,
            level=level,
        )

    logger.debug("level %d: Newton start, |F| = %.3e", level, norm)
    while not norm <= cfg.newton_tol:
        if report.newton_iters >= cfg.max_newton:
            give_up(f"{report.newton_iters} Newton iterations, |F| = {best_norm:.3e}")

        J = system.jacobian(w)
        step, gmres_iters, direct = krylov.solve(J, -F)
        report.gmres_iters += gmres_iters
        report.direct_solves += int(direct)

        factors = cfg.damping if cfg.line_search else (1.0,)
        for factor in factors:
            trial = w + factor * step
            F_trial = system.residual(trial)
            trial_norm = float(np.max(np.abs(F_trial)))
            if not cfg.line_search or trial_norm < norm:
                break
        else:
            report.newton_iters += 1
            give_up(f"line search could not reduce |F| = {norm:.3e}")

        w, F, norm = trial, F_trial, trial_norm
        report.newton_iters += 1
        if norm < best_norm:
            best_w, best_norm = w.copy(), norm
        logger.debug(
            "level %d: iteration %d, step %.3g, |F| = %.3e, GMRES %d%s",
            level,
            report.newton_iters,
            factor,
            norm,
            gmres_iters,
            " + LU" if direct else "",
        )

    report.final_residual = norm
    report.seconds = time.perf_counter() - started
    logger.info(
        "level %d (%dx%d): converged in %d Newton / %d GMRES iterations, %d LU solves, |F| = %.3e",
        level,
        grid.num_cells,
        grid.num_steps,
        report.newton_iters,
        report.gmres_iters,
        report.direct_solves,
        norm,
    )
    return _finalize(w, spec, cfg), SolveReport(levels=[report])


# -- grid transfer ----------------------------------------------------------


def cold_start(spec: ProblemSpec) -> np.ndarray:
    """The uniform mean state: ``rho`` = mean initial density, ``u = U(mean)``, ``V = 0``."""

    grid = spec.grid
    mean = float(np.mean(spec.initial_cells))
    speed = float(spec.cost.equilibrium_speed(np.asarray(mean)))
    nt, nx = grid.num_steps, grid.num_cells
    return pack_arrays(
        np.full((nt + 1, nx), mean),
        np.full((nt, nx), speed),
        np.zeros((nt + 1, nx)),
    )


def _node_offset(field: ScalarField) -> int:
    if field.stagger not in (0.0, 1.0):
        raise ConfigurationError(f"{field.name}: unsupported node stagger {field.stagger}")
    return int(field.stagger)


def _refine_time(values):
    fine = np.empty((2 * values.shape[0] - 1, values.shape[1]))
    fine[0::2] = values
    fine[1::2] = 0.5 * (values[:-1] + values[1:])
    return fine


def _refine_space(values, field: ScalarField):
    fine = np.empty(values.shape[:-1] + (2 * values.shape[-1],))
    if field.stagger == 0.5:
        # Linear reconstruction with central slopes; children average to the parent.
        delta = (np.roll(values, -1, axis=-1) - np.roll(values, 1, axis=-1)) / 8.0
        fine[..., 0::2] = values - delta
        fine[..., 1::2] = values + delta
        return fine
    s = _node_offset(field)
    fine[..., s::2] = values
    fine[..., 1 - s :: 2] = 0.5 * (values + np.roll(values, 2 * s - 1, axis=-1))
    return fine


def _require_refinement(fine_grid, coarse_grid):
    if not fine_grid.is_refinement_of(coarse_grid, 2):
        raise ConfigurationError(
            f"{fine_grid.num_cells}x{fine_grid.num_steps} is not a 2x refinement of "
            f"{coarse_grid.num_cells}x{coarse_grid.num_steps}",
            key="solver.refinement",
        )


def refine_field(field: ScalarField, fine_grid: SpaceTimeGrid) -> ScalarField:
    """Interpolate one field onto the 2x refined grid.

    Linear in time; in space, node values are injected at coincident nodes and
    averaged at midpoints, and cell averages use a linear reconstruction.
    """

    _require_refinement(fine_grid, field.grid)
    values = _refine_space(_refine_time(field.values), field)
    return ScalarField(
        fine_grid,
        values,
        stagger=field.stagger,
        derived_last_level=field.derived_last_level,
        name=field.name,
    )


def interpolate_solution(
    coarse: SolutionTriple, fine_grid: SpaceTimeGrid, *, u_max: t.Optional[float] = None
) -> np.ndarray:
    """Interpolate a coarse solution to the 2x refined grid as a Newton guess.

    Speeds are clamped into ``[0, u_max]`` (``u_max`` defaults to the largest
    coarse speed).

    :raises ConfigurationError: if ``fine_grid`` is not a 2x refinement.
    """

    rho = refine_field(coarse.rho, fine_grid).values
    u = refine_field(coarse.u, fine_grid).values[:-1]
    V = refine_field(coarse.V, fine_grid).values
    top = float(coarse.u.values.max()) if u_max is None else u_max
    return pack_arrays(rho, np.clip(u, 0.0, top), V)


def restrict_solution(fine: SolutionTriple, coarse_grid: SpaceTimeGrid) -> SolutionTriple:
    """Restrict a solution to the 2x coarser grid.

    Time levels and node values are injected; cell averages are averaged over
    the two children.
    """

    _require_refinement(fine.grid, coarse_grid)

    def restrict(field):
        values = field.values[0::2]
        if field.stagger == 0.5:
            values = 0.5 * (values[:, 0::2] + values[:, 1::2])
        else:
            values = values[:, _node_offset(field) :: 2]
        return ScalarField(
            coarse_grid,
            values,
            stagger=field.stagger,
            derived_last_level=field.derived_last_level,
            name=field.name,
        )

    return SolutionTriple(rho=restrict(fine.rho), u=restrict(fine.u), V=restrict(fine.V))


def grid_hierarchy(grid: SpaceTimeGrid, cfg: SolverConfig) -> t.List[SpaceTimeGrid]:
    """Grids from the coarsest level up to ``grid``, halving ``Nx`` and ``Nt`` together.

    :raises ConfigurationError: if ``coarsest_nx`` is not reached by halving.
    """

    levels = [grid]
    while levels[-1].num_cells > cfg.coarsest_nx:
        try:
            levels.append(levels[-1].coarsened(cfg.refinement))
        except DimensionError as exc:
            raise ConfigurationError(str(exc), key="solver.coarsest_nx") from None
    if levels[-1].num_cells != cfg.coarsest_nx:
        raise ConfigurationError(
            f"{grid.num_cells} cells cannot be halved down to {cfg.coarsest_nx}",
            key="solver.coarsest_nx",
        )
    return levels[::-1]


def multigrid_solve(
    spec: ProblemSpec, cfg: t.Optional[SolverConfig] = None
) -> t.Tuple[SolutionTriple, SolveReport]:
    """Nested iteration: cold start on the coarsest grid, then refine.

    :raises NonConvergenceError: naming the level that failed.
    """

    cfg = cfg or SolverConfig()
    grids = grid_hierarchy(spec.grid, cfg)
    report = SolveReport()
    solution = None

    for level, grid in enumerate(grids):
        level_spec = spec.with_grid(grid)
        if solution is None:
            w0 = cold_start(level_spec)
        else:
            w0 = interpolate_solution(solution, grid, u_max=spec.u_max)
        solution, level_report = newton_solve(level_spec, w0, cfg, level=level)
        report.extend(level_report)

    return solution, report
