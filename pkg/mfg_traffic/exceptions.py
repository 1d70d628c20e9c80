class MFGError(Exception):
    """Base class for every error raised by ``mfg_traffic``."""


class ConfigurationError(MFGError, ValueError):
    """An input violates a precondition (CFL, refinement ratio, spec mismatch, ...)."""

    def __init__(self, message, *, key=None):
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class DomainError(ConfigurationError):
    """A query falls outside the space-time domain."""


class DimensionError(MFGError, ValueError):
    pass


class ConstraintViolation(MFGError, ValueError):
    pass


class NonConvergenceError(MFGError):
    """Newton's method stopped before reaching the requested tolerance.

    :param best_iterate: The unpacked iterate with the smallest residual seen.
    :param best_residual: Its residual max-norm.
    :param level: Multigrid level index (``None`` outside a hierarchy).
    """

    def __init__(self, message, *, best_iterate=None, best_residual=None, level=None):
        if level is not None:
            message = f"level {level}: {message}"
        super().__init__(message)
        self.best_iterate = best_iterate
        self.best_residual = best_residual
        self.level = level


class LinearSolverError(MFGError):
    pass


class PreconditionerError(LinearSolverError):
    pass
