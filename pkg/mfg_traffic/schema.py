"""Typed experiment configuration and its loaders.

A configuration is assembled from, in increasing precedence: the defaults
below, a TOML file (``--config`` or ``MFG_TRAFFIC_CONFIG``), the ``--model``
and ``--out`` flags, and repeatable ``--set key=value`` overrides.
"""

import os
import sys
import typing as t

from pydantic import ConfigDict, Field, TypeAdapter, ValidationError
from pydantic.dataclasses import dataclass

from .exceptions import ConfigurationError
from .solver import SolverConfig
from .utils import flatten_mapping, nest_mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MFG_TRAFFIC_CONFIG_ENVIRON = "MFG_TRAFFIC_CONFIG"

EXPERIMENTS = ("solve", "fd", "converge", "myopic", "dg-validate")

Section = ConfigDict(extra="forbid")
Positive = t.Annotated[float, Field(gt=0)]


@dataclass(frozen=True, config=Section)
class GridSection:
    length: Positive = 1.0
    horizon: Positive = 3.0
    nx: t.Annotated[int, Field(ge=2)] = 120
    nt: t.Annotated[int, Field(ge=1)] = 480


@dataclass(frozen=True, config=Section)
class InitialSection:
    """Initial bump ``rho_a + (rho_b - rho_a) * exp(-(x - L/2)^2 / (2 gamma^2))``."""

    rho_a: t.Annotated[float, Field(ge=0)] = 0.05
    rho_b: t.Annotated[float, Field(ge=0)] = 0.95
    gamma: Positive = 0.1


@dataclass(frozen=True, config=Section)
class RoadSection:
    u_max: Positive = 1.0
    rho_jam: Positive = 1.0


@dataclass(frozen=True, config=Section)
class MicroSection:
    """The N-car sweep; lengths are relative to ``L = N``."""

    num_cars: t.Tuple[t.Annotated[int, Field(ge=1)], ...] = (21, 41, 61, 81, 101)
    models: t.Tuple[t.Literal["lwr", "separable", "nonseparable"], ...] = ("separable", "nonseparable")
    horizon: Positive = 1.0
    sigma_ratio: Positive = 0.05
    rho_a: t.Annotated[float, Field(ge=0)] = 0.2
    rho_b: t.Annotated[float, Field(ge=0)] = 0.8
    gamma_ratio: Positive = 0.15
    cells_per_car: t.Annotated[int, Field(ge=1)] = 4
    cfl_target: t.Annotated[float, Field(gt=0, le=1)] = 0.75
    sampling: t.Literal["quantile", "seeded"] = "quantile"
    seed: int = 0
    density_convention: t.Literal["count", "fraction", "matched"] = "matched"
    include_self: bool = True
    guard_incumbent: bool = True


@dataclass(frozen=True, config=Section)
class StudySection:
    """Grids and horizons of the convergence, myopic and fundamental-diagram studies."""

    convergence_nx: t.Tuple[t.Annotated[int, Field(ge=4)], ...] = (30, 60, 120)
    nt_per_nx: t.Annotated[int, Field(ge=1)] = 4
    myopic_horizons: t.Tuple[Positive, ...] = (0.5, 0.25, 0.125, 0.0625, 0.03125)
    fd_locations: t.Annotated[int, Field(ge=1)] = 24
    fd_snapshots: t.Annotated[int, Field(ge=1)] = 96


@dataclass(frozen=True, config=Section)
class OutputSection:
    directory: str = "results"
    gnuplot: bool = False


@dataclass(frozen=True, config=Section)
class ExperimentConfig:
    """Everything one CLI run needs."""

    experiment: t.Literal["solve", "fd", "converge", "myopic", "dg-validate"] = "solve"
    model: t.Literal["lwr", "separable", "nonseparable"] = "lwr"
    stencil: t.Literal["upwind", "literal"] = "upwind"
    workers: t.Annotated[int, Field(ge=1)] = 1
    grid: GridSection = Field(default_factory=GridSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    road: RoadSection = Field(default_factory=RoadSection)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    micro: MicroSection = Field(default_factory=MicroSection)
    study: StudySection = Field(default_factory=StudySection)
    output: OutputSection = Field(default_factory=OutputSection)

    def to_dict(self) -> t.Dict[str, t.Any]:
        """JSON-compatible nested mapping of every setting."""

        return TypeAdapter(ExperimentConfig).dump_python(self, mode="json")

    @classmethod
    def from_mapping(cls, mapping: t.Mapping[str, t.Any]) -> "ExperimentConfig":
        """Validate a nested mapping.

        :raises ConfigurationError: naming the first offending dotted key.
        """

        try:
            return cls(**mapping)
        except ValidationError as exc:
            error = exc.errors()[0]
            key = ".".join(str(part) for part in error["loc"]) or None
            raise ConfigurationError(error["msg"], key=key) from None
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


def read_config_file(path) -> t.Dict[str, t.Any]:
    """Read a TOML configuration file into flat dotted keys."""

    try:
        with open(path, "rb") as f:
            return flatten_mapping(tomllib.load(f))
    except FileNotFoundError:
        raise ConfigurationError(f"no such file: {path}", key="config") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}", key="config") from None


def parse_override(text: str) -> t.Tuple[str, t.Any]:
    """Split ``key=value``; the value is read as a TOML literal, else kept as a string."""

    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(f"expected key=value, got {text!r}", key="--set")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def load_config(
    path=None,
    *,
    experiment: t.Optional[str] = None,
    model: t.Optional[str] = None,
    out: t.Optional[str] = None,
    overrides: t.Iterable[str] = (),
    environ: t.Optional[t.Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Assemble and validate a configuration.

    :param path: TOML file; falls back to the ``MFG_TRAFFIC_CONFIG`` environment variable.
    :param experiment: Experiment kind (the CLI subcommand).
    :param model: Cost model key.
    :param out: Output directory.
    :param overrides: ``key=value`` strings with dotted keys.
    :param environ: Environment mapping (default is ``os.environ``).
    :return: A validated :class:`ExperimentConfig`.
    """

    environ = os.environ if environ is None else environ
    path = path or environ.get(MFG_TRAFFIC_CONFIG_ENVIRON)

    flat = read_config_file(path) if path else {}
    if experiment is not None:
        flat["experiment"] = experiment
    if model is not None:
        flat["model"] = model
    if out is not None:
        flat["output.directory"] = out
    flat.update(parse_override(text) for text in overrides)

    return ExperimentConfig.from_mapping(nest_mapping(flat))
