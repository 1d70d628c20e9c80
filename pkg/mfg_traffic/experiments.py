"""Experiment drivers behind the command line.

Every driver takes a validated :class:`~mfg_traffic.schema.ExperimentConfig`,
writes its CSV outputs under ``config.output.directory`` and returns what it
wrote. :func:`run_experiment` validates the configuration, dispatches on
``config.experiment`` and records a ``manifest.json`` next to the outputs.
"""

import json
import logging
import math
import pathlib
import typing as t
from concurrent.futures import ProcessPoolExecutor
from functools import wraps

import numpy as np
import pandas as pd
import pydantic
import scipy

from .__version__ import __version__
from .costs import make_cost_model
from .discretization import GaussianBump, ProblemSpec, check_cfl
from .exceptions import ConfigurationError, NonConvergenceError
from .grid import (
    CSV_FLOAT_FORMAT,
    SolutionTriple,
    SpaceTimeGrid,
    cell_averages,
    interpolate_space_time,
    l1_norm,
    max_gradient,
    total_variation,
    write_field_csv,
    write_field_gnuplot,
)
from .lwr import lwr_guess, solve_lwr, verify_theorem1
from .micro import (
    AccuracyReport,
    CarEnsemble,
    KernelSpec,
    car_mass_for,
    construct_controls,
    epsilon_accuracy,
    sample_initial_positions,
)
from .schema import ExperimentConfig
from .solver import (
    SolveReport,
    cold_start,
    grid_hierarchy,
    multigrid_solve,
    newton_solve,
    refine_field,
)
from .utils import compact_mapping, loglog_slope, to_iso8601, utc_now

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def returns_frame(columns):
    """Decorator that collects the rows a function returns into a DataFrame.

    :param columns: Column names, in row order.
    :return: A :class:`pandas.DataFrame`.
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            return pd.DataFrame(list(func(*args, **kwargs)), columns=columns)

        return wrapper

    return decorator


# -- setup ------------------------------------------------------------------


def output_directory(config: ExperimentConfig) -> pathlib.Path:
    path = pathlib.Path(config.output.directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_spec(
    config: ExperimentConfig,
    *,
    grid: t.Optional[SpaceTimeGrid] = None,
    model: t.Optional[str] = None,
) -> ProblemSpec:
    """The problem described by ``config`` (optionally on another grid or model)."""

    if grid is None:
        grid = SpaceTimeGrid(config.grid.length, config.grid.horizon, config.grid.nx, config.grid.nt)
    cost = make_cost_model(model or config.model, u_max=config.road.u_max, rho_jam=config.road.rho_jam)
    bump = GaussianBump(config.initial.rho_a, config.initial.rho_b, config.initial.gamma, grid.road_length)
    return ProblemSpec(grid=grid, cost=cost, initial_density=bump, stencil=config.stencil)


def micro_grid(config: ExperimentConfig, num_cars: int) -> SpaceTimeGrid:
    """Grid of the ``N``-car experiment on a ring of length ``N``.

    ``Nx = cells_per_car * N`` and ``Nt`` is the smallest multiple of 4 with
    ``u_max * dt / dx <= cfl_target``.
    """

    micro = config.micro
    length = float(num_cars)
    nx = micro.cells_per_car * num_cars
    dx = length / nx
    needed = config.road.u_max * micro.horizon / (dx * micro.cfl_target)
    nt = 4 * max(1, math.ceil(needed / 4 - 1e-12))
    return SpaceTimeGrid(length, micro.horizon, nx, nt)


def convergence_grids(config: ExperimentConfig) -> t.List[SpaceTimeGrid]:
    """Every grid the convergence study solves on: each ``Nx`` and its half."""

    sizes = sorted({n for nx in config.study.convergence_nx for n in (nx, nx // 2)})
    return [
        SpaceTimeGrid(config.grid.length, config.grid.horizon, nx, config.study.nt_per_nx * nx)
        for nx in sizes
    ]


def myopic_grids(config: ExperimentConfig) -> t.List[SpaceTimeGrid]:
    """Grids for the shrinking horizons; ``Nt`` scales with ``T`` so ``dt/dx`` is fixed."""

    grids = []
    for horizon in config.study.myopic_horizons:
        nt = max(1, round(config.grid.nt * horizon / config.grid.horizon))
        grids.append(SpaceTimeGrid(config.grid.length, horizon, config.grid.nx, nt))
    return grids


def _require_cfl(spec: ProblemSpec, key: str):
    report = check_cfl(spec)
    if not report.passed:
        raise ConfigurationError(
            f"u_max*dt/dx = {report.ratio:.4g} > 1 on {spec.grid.num_cells}x{spec.grid.num_steps}",
            key=key,
        )


def validate(config: ExperimentConfig) -> None:
    """Cross-field checks run before any numerical work.

    :raises ConfigurationError: naming the offending key.
    """

    kind = config.experiment
    if kind in ("solve", "fd"):
        spec = build_spec(config)
        _require_cfl(spec, "grid.nt")
        grid_hierarchy(spec.grid, config.solver)
    elif kind == "converge":
        for grid in convergence_grids(config):
            spec = build_spec(config, grid=grid)
            _require_cfl(spec, "study.nt_per_nx")
            grid_hierarchy(grid, config.solver)
    elif kind == "myopic":
        if config.model == "separable":
            raise ConfigurationError(
                "the myopic limit needs a density-dependent equilibrium speed", key="model"
            )
        for grid in myopic_grids(config):
            _require_cfl(build_spec(config, grid=grid), "study.myopic_horizons")
    elif kind == "dg-validate":
        if config.micro.rho_a == config.micro.rho_b == 0.0:
            raise ConfigurationError("initial density has no mass", key="micro.rho_b")
        if not config.micro.models:
            raise ConfigurationError("no models to validate", key="micro.models")


def map_cells(func, cells: t.Sequence[tuple], workers: int = 1) -> list:
    """Evaluate ``func(*cell)`` for every cell, in a process pool when ``workers > 1``.

    Results keep the order of ``cells``.
    """

    if workers <= 1 or len(cells) <= 1:
        return [func(*cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, *cell) for cell in cells]
        return [future.result() for future in futures]


# -- outputs ----------------------------------------------------------------


@returns_frame(["t", "mass", "total_variation", "max_gradient"])
def density_diagnostics(rho) -> t.Iterator[tuple]:
    """Total mass, total variation and steepest gradient of every density level."""

    grid = rho.grid
    for time, level in zip(grid.times(), rho.values):
        yield time, float(level.sum() * grid.dx), total_variation(level), max_gradient(level, grid.dx)


def write_solution(solution: SolutionTriple, directory, *, gnuplot=False, prefix="") -> t.List[pathlib.Path]:
    directory = pathlib.Path(directory)
    written = []
    for name, field in solution.fields().items():
        path = directory / f"{prefix}{name}.csv"
        write_field_csv(field, path)
        written.append(path)
        if gnuplot:
            dat = path.with_suffix(".dat")
            write_field_gnuplot(field, dat)
            written.append(dat)
    return written


def write_frame(frame: pd.DataFrame, path) -> pathlib.Path:
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return pathlib.Path(path)


def write_manifest(config: ExperimentConfig, directory, **extra) -> pathlib.Path:
    """Record the configuration, package versions, seeds and status of a run."""

    manifest = {
        "created_at": to_iso8601(utc_now()),
        "config": config.to_dict(),
        "versions": {
            "mfg_traffic": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
        "seeds": {"micro": config.micro.seed if config.micro.sampling == "seeded" else None},
    }
    if config.experiment == "dg-validate":
        grids = {n: micro_grid(config, n) for n in config.micro.num_cars}
        manifest["micro_grids"] = {
            str(n): {"nx": g.num_cells, "nt": g.num_steps, "road_length": g.road_length}
            for n, g in grids.items()
        }
    manifest.update(compact_mapping(extra))

    path = pathlib.Path(directory) / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)
    return path


# -- experiments ------------------------------------------------------------


class MfeRun(t.NamedTuple):
    solution: SolutionTriple
    report: SolveReport
    theorem1_residual: t.Optional[float]


def solve_mfe(config: ExperimentConfig) -> t.Tuple[SolutionTriple, SolveReport]:
    return multigrid_solve(build_spec(config), config.solver)


def run_mfe(config: ExperimentConfig) -> MfeRun:
    """Solve the configured MFE and write its fields, report and density diagnostics.

    For the LWR-tracking model the LWR march is also checked against the
    discrete system and its residual returned.
    """

    directory = output_directory(config)
    spec = build_spec(config)
    solution, report = multigrid_solve(spec, config.solver)

    write_solution(solution, directory, gnuplot=config.output.gnuplot)
    report.write_csv(directory / "solve_report.csv")
    write_frame(density_diagnostics(solution.rho), directory / "density_diagnostics.csv")

    residual = None
    if config.model == "lwr":
        lwr = solve_lwr(spec.grid, spec.cost.speed_curve, spec.initial_density)
        residual = verify_theorem1(lwr, spec)
        logger.info("LWR solution residual in the tracking game: %.3e", residual)
    return MfeRun(solution, report, residual)


@returns_frame(["rho", "q"])
def sample_fundamental_diagram(solution: SolutionTriple, locations: int = 24, snapshots: int = 96):
    """``(rho, q = rho * u)`` at ``x_i = (i - 1/2) L / n_x`` and ``t^k = k T / n_t``."""

    grid = solution.grid
    x = (np.arange(1, locations + 1) - 0.5) * grid.road_length / locations
    for k in range(snapshots + 1):
        time = k * grid.horizon / snapshots
        rho = np.atleast_1d(interpolate_space_time(solution.rho, x, time))
        u = np.atleast_1d(interpolate_space_time(solution.u, x, time))
        yield from zip(rho, rho * u)


def fundamental_diagram(config: ExperimentConfig, solution: t.Optional[SolutionTriple] = None) -> pd.DataFrame:
    """Sample density and flow from an MFE (solved inline when not given)."""

    directory = output_directory(config)
    if solution is None:
        solution, report = solve_mfe(config)
        report.write_csv(directory / "solve_report.csv")
    frame = sample_fundamental_diagram(solution, config.study.fd_locations, config.study.fd_snapshots)
    write_frame(frame, directory / "fundamental_diagram.csv")
    return frame


def _solve_on(config: ExperimentConfig, grid: SpaceTimeGrid) -> SolutionTriple:
    solution, _ = multigrid_solve(build_spec(config, grid=grid), config.solver)
    return solution


@returns_frame(["nx", "nt", "error"])
def _convergence_rows(config, solutions):
    for nx in config.study.convergence_nx:
        fine, coarse = solutions[nx], solutions[nx // 2]
        rho = refine_field(coarse.rho, fine.grid)
        u = refine_field(coarse.u, fine.grid)
        yield nx, fine.grid.num_steps, l1_norm(fine.rho, rho) + l1_norm(fine.u, u)


def convergence_study(config: ExperimentConfig) -> pd.DataFrame:
    """Self-convergence: distance between each grid's solution and its interpolated half-grid solution.

    The fitted log-log slope is kept in ``frame.attrs["slope"]``.
    """

    directory = output_directory(config)
    grids = convergence_grids(config)
    solved = map_cells(_solve_on, [(config, grid) for grid in grids], config.workers)
    solutions = {grid.num_cells: solution for grid, solution in zip(grids, solved)}

    frame = _convergence_rows(config, solutions)
    slope = loglog_slope(frame["nx"], frame["error"]) if len(frame) > 1 else math.nan
    frame.attrs["slope"] = slope
    logger.info("convergence slope %.3f", slope)

    write_frame(frame, directory / "convergence.csv")
    return frame


def _myopic_deviation(config: ExperimentConfig, grid: SpaceTimeGrid) -> float:
    spec = build_spec(config, grid=grid)
    solution, _ = newton_solve(spec, lwr_guess(spec), config.solver)
    myopic = spec.cost.equilibrium_speed(spec.initial_cells)
    return float(np.max(np.abs(solution.u.values[0] - myopic)))


@returns_frame(["T", "nt", "deviation"])
def myopic_limit(config: ExperimentConfig):
    """``max_x |u(x, 0) - U(rho_0(x))|`` for shrinking horizons."""

    grids = myopic_grids(config)
    deviations = map_cells(_myopic_deviation, [(config, grid) for grid in grids], config.workers)
    for grid, deviation in zip(grids, deviations):
        logger.info("T = %g: myopic deviation %.3e", grid.horizon, deviation)
        yield grid.horizon, grid.num_steps, deviation


def micro_ensemble(config: ExperimentConfig, num_cars: int, grid: SpaceTimeGrid) -> CarEnsemble:
    """Cars sampled from the configured bump on a ring of length ``N``."""

    micro = config.micro
    length = grid.road_length
    bump = GaussianBump(micro.rho_a, micro.rho_b, micro.gamma_ratio * length, length)
    positions = sample_initial_positions(num_cars, bump, length, micro.sampling, micro.seed)
    mass = float(cell_averages(bump, grid).sum() * grid.dx)
    return CarEnsemble(
        positions=positions,
        road_length=length,
        kernel=KernelSpec(micro.sigma_ratio * length),
        car_mass=car_mass_for(micro.density_convention, num_cars, mass),
        include_self=micro.include_self,
    )


def validate_controls(config: ExperimentConfig, model: str, num_cars: int) -> AccuracyReport:
    """Construct controls from the MFE of one ``N``-car setup and measure their accuracy.

    The MFE starts from the smoothed density of the sampled cars, the same
    density their driving costs are charged against.
    """

    micro = config.micro
    grid = micro_grid(config, num_cars)
    cost = make_cost_model(model, u_max=config.road.u_max, rho_jam=config.road.rho_jam)
    ensemble = micro_ensemble(config, num_cars, grid)
    spec = ProblemSpec(
        grid=grid, cost=cost, initial_density=ensemble.initial_density, stencil=config.stencil
    )

    try:
        mfe, _ = newton_solve(spec, cold_start(spec), config.solver)
    except NonConvergenceError:
        logger.error("dg-validate: MFE for %s with N=%d did not converge", model, num_cars)
        raise

    controls = construct_controls(mfe, ensemble)
    return epsilon_accuracy(
        controls,
        ensemble,
        cost,
        grid,
        guard_incumbent=micro.guard_incumbent,
        stencil=config.stencil,
    )


def dg_validate(config: ExperimentConfig) -> pd.DataFrame:
    """Accuracy of MFE-constructed controls across car counts and models.

    Writes one ``accuracy_<model>_N<N>.csv`` per cell and ``dg_summary.csv``.
    """

    directory = output_directory(config)
    cells = [(config, model, n) for model in config.micro.models for n in config.micro.num_cars]
    reports = map_cells(validate_controls, cells, config.workers)

    rows = []
    for (_, model, n), report in zip(cells, reports):
        report.write_csv(directory / f"accuracy_{model}_N{n}.csv")
        rows.append((n, model, report.max_ra, report.mean_ra))
    summary = pd.DataFrame(rows, columns=["N", "model", "max_ra", "mean_ra"])
    write_frame(summary, directory / "dg_summary.csv")
    return summary


def _run_solve(config):
    run = run_mfe(config)
    return {
        "final_residual": run.report.final_residual,
        "gmres_iters": run.report.gmres_iters,
        "direct_solves": run.report.direct_solves,
        "theorem1_residual": run.theorem1_residual,
    }


def _run_fd(config):
    frame = fundamental_diagram(config)
    return {"samples": len(frame)}


def _run_converge(config):
    frame = convergence_study(config)
    return {"slope": frame.attrs["slope"]}


def _run_myopic(config):
    frame = myopic_limit(config)
    write_frame(frame, output_directory(config) / "myopic.csv")
    return {"deviations": frame["deviation"].tolist()}


def _run_dg_validate(config):
    summary = dg_validate(config)
    return {"summary": summary.to_dict(orient="records")}


EXPERIMENTS: t.Dict[str, t.Callable[[ExperimentConfig], t.Dict[str, t.Any]]] = {
    "solve": _run_solve,
    "fd": _run_fd,
    "converge": _run_converge,
    "myopic": _run_myopic,
    "dg-validate": _run_dg_validate,
}


def run_experiment(config: ExperimentConfig) -> t.Dict[str, t.Any]:
    """Validate, run and record one experiment.

    :return: The experiment's summary values (also stored in the manifest).
    :raises ConfigurationError: before any numerical work on invalid input.
    :raises NonConvergenceError: after writing the best iterate as ``partial_*``
        files and a manifest with status ``nonconverged``.
    """

    validate(config)
    directory = output_directory(config)
    logger.info("running %s (%s) into %s", config.experiment, config.model, directory)

    try:
        results = EXPERIMENTS[config.experiment](config)
    except NonConvergenceError as exc:
        if exc.best_iterate is not None:
            write_solution(exc.best_iterate, directory, prefix="partial_")
        write_manifest(
            config,
            directory,
            status="nonconverged",
            error=str(exc),
            best_residual=exc.best_residual,
        )
        raise

    write_manifest(config, directory, status="ok", results=results)
    return results
