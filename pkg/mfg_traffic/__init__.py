from .__version__ import __version__
from .costs import (
    GreenshieldsSpeed,
    LwrTrackingCost,
    NonSeparableCost,
    SeparableCost,
    calibration_report,
    equilibrium_speed,
    hamiltonian,
    make_cost_model,
    optimal_speed,
    running_cost,
)
from .discretization import (
    GaussianBump,
    ProblemSpec,
    assemble_jacobian,
    assemble_residual,
    check_cfl,
    hjb_backstep,
    lf_step,
    pack,
    unpack,
)
from .exceptions import (
    ConfigurationError,
    ConstraintViolation,
    DimensionError,
    DomainError,
    LinearSolverError,
    MFGError,
    NonConvergenceError,
    PreconditionerError,
)
from .grid import ScalarField, SolutionTriple, SpaceTimeGrid, interpolate_space_time, l1_norm
from .lwr import LwrRun, lwr_guess, solve_lwr, verify_theorem1
from .micro import (
    AccuracyReport,
    CarEnsemble,
    ControlSet,
    KernelSpec,
    best_response,
    construct_controls,
    driving_cost,
    epsilon_accuracy,
    sample_initial_positions,
    smooth_density,
)
from .schema import ExperimentConfig, load_config
from .solver import (
    SolveReport,
    SolverConfig,
    apply_preconditioner,
    interpolate_solution,
    multigrid_solve,
    newton_solve,
    restrict_solution,
)


def from_environ():
    """Load an experiment configuration named by the `MFG_TRAFFIC_CONFIG` environment variable."""

    return load_config()
