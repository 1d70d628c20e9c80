"""Running costs f(u, rho), their constrained Legendre transforms, and optimal speeds.

Every model has a quadratic running cost in ``u``, so the minimizer of
``f(a, rho) + a * p`` over ``a in [0, u_max]`` is an affine function of ``p``
clamped to the speed interval. All functions accept scalars or numpy arrays.

At a clamp boundary the minimizer's derivatives are taken from the clamped
side (zero); the interior test is strict.
"""

import typing as t

import numpy as np
from pydantic import Field
from pydantic.dataclasses import dataclass

from .exceptions import ConfigurationError, ConstraintViolation

#: Slack on the speed interval when checking admissibility.
SPEED_SLACK = 1e-12

Positive = t.Annotated[float, Field(gt=0)]


@dataclass(frozen=True)
class GreenshieldsSpeed:
    """The linear equilibrium speed ``U(rho) = u_max * (1 - rho / rho_jam)``."""

    u_max: Positive = 1.0
    rho_jam: Positive = 1.0

    def __call__(self, rho):
        return self.u_max * (1.0 - np.asarray(rho, dtype=float) / self.rho_jam)

    def derivative(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), -self.u_max / self.rho_jam)


class HamiltonianTerms(t.NamedTuple):
    """``f*`` and its partial derivatives at a batch of ``(p, rho)``."""

    value: np.ndarray
    d_p: np.ndarray
    d_rho: np.ndarray
    d_pp: np.ndarray
    d_prho: np.ndarray


class CostModel:
    """Common machinery; subclasses supply the cost and its unconstrained minimizer."""

    key: t.ClassVar[str]

    # -- model-specific pieces -------------------------------------------

    def _cost(self, u, rho):
        raise NotImplementedError

    def _cost_d_rho(self, u, rho):
        raise NotImplementedError

    def _cost_d_u(self, u, rho):
        raise NotImplementedError

    def _cost_d_urho(self, u, rho):
        raise NotImplementedError

    def _unconstrained(self, p, rho):
        """Return ``(a, da/dp, da/drho)`` for the unconstrained minimizer ``a``."""

        raise NotImplementedError

    # -- shared ----------------------------------------------------------

    def running_cost(self, u, rho):
        u = np.asarray(u, dtype=float)
        if np.any(u < -SPEED_SLACK) or np.any(u > self.u_max + SPEED_SLACK):
            raise ConstraintViolation(f"speed outside [0, {self.u_max}]")
        return self._cost(np.clip(u, 0.0, self.u_max), np.asarray(rho, dtype=float))

    def minimizer(self, p, rho):
        """Return the clamped minimizer and the mask of strictly interior points."""

        a, _, _ = self._unconstrained(np.asarray(p, dtype=float), np.asarray(rho, dtype=float))
        interior = (a > 0.0) & (a < self.u_max)
        return np.clip(a, 0.0, self.u_max), interior

    def optimal_speed(self, p, rho):
        return self.minimizer(p, rho)[0]

    def hamiltonian(self, p, rho):
        p = np.asarray(p, dtype=float)
        rho = np.asarray(rho, dtype=float)
        alpha = self.optimal_speed(p, rho)
        return self._cost(alpha, rho) + alpha * p

    def equilibrium_speed(self, rho):
        return self.optimal_speed(np.zeros_like(np.asarray(rho, dtype=float)), rho)

    def hamiltonian_terms(self, p, rho) -> HamiltonianTerms:
        """Values and derivatives of ``f*`` used for Jacobian assembly.

        ``d_p`` is the minimizer itself and ``d_rho`` is ``f_rho`` at the
        minimizer (envelope theorem; the speed interval does not depend on
        ``p`` or ``rho``).
        """

        p, rho = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(rho, dtype=float))
        a, a_p, a_rho = self._unconstrained(p, rho)
        interior = (a > 0.0) & (a < self.u_max)
        alpha = np.clip(a, 0.0, self.u_max)
        return HamiltonianTerms(
            value=self._cost(alpha, rho) + alpha * p,
            d_p=alpha,
            d_rho=self._cost_d_rho(alpha, rho),
            d_pp=np.where(interior, a_p, 0.0),
            d_prho=np.where(interior, a_rho, 0.0),
        )


@dataclass(frozen=True)
class LwrTrackingCost(CostModel):
    """``f(u, rho) = 1/2 * (U(rho) - u)^2``: track an equilibrium speed.

    :param equilibrium: The tracked speed curve; Greenshields with this
        model's ``u_max`` and ``rho_jam`` when omitted.
    """

    key: t.ClassVar[str] = "lwr"

    u_max: Positive = 1.0
    rho_jam: Positive = 1.0
    equilibrium: t.Optional[GreenshieldsSpeed] = None

    @property
    def speed_curve(self) -> GreenshieldsSpeed:
        return self.equilibrium or GreenshieldsSpeed(self.u_max, self.rho_jam)

    def _cost(self, u, rho):
        return 0.5 * (self.speed_curve(rho) - u) ** 2

    def _cost_d_rho(self, u, rho):
        U = self.speed_curve
        return (U(rho) - u) * U.derivative(rho)

    def _cost_d_u(self, u, rho):
        return u - self.speed_curve(rho)

    def _cost_d_urho(self, u, rho):
        return -self.speed_curve.derivative(rho)

    def _unconstrained(self, p, rho):
        U = self.speed_curve
        return U(rho) - p, -np.ones_like(p * rho), U.derivative(rho) + 0.0 * p


@dataclass(frozen=True)
class SeparableCost(CostModel):
    """``f(u, rho) = 1/2 (u/u_max)^2 - u/u_max + rho/rho_jam``."""

    key: t.ClassVar[str] = "separable"

    u_max: Positive = 1.0
    rho_jam: Positive = 1.0

    def _cost(self, u, rho):
        s = u / self.u_max
        return 0.5 * s**2 - s + rho / self.rho_jam

    def _cost_d_rho(self, u, rho):
        return np.full_like(np.asarray(u * rho, dtype=float), 1.0 / self.rho_jam)

    def _cost_d_u(self, u, rho):
        return u / self.u_max**2 - 1.0 / self.u_max + 0.0 * rho

    def _cost_d_urho(self, u, rho):
        return np.zeros_like(np.asarray(u * rho, dtype=float))

    def _unconstrained(self, p, rho):
        um = self.u_max
        a = um * (1.0 - um * p) + 0.0 * rho
        return a, np.full_like(a, -(um**2)), np.zeros_like(a)


@dataclass(frozen=True)
class NonSeparableCost(CostModel):
    """``f(u, rho) = 1/2 (u/u_max)^2 - u/u_max + u*rho/(u_max*rho_jam)``."""

    key: t.ClassVar[str] = "nonseparable"

    u_max: Positive = 1.0
    rho_jam: Positive = 1.0

    def _cost(self, u, rho):
        s = u / self.u_max
        return 0.5 * s**2 - s + s * rho / self.rho_jam

    def _cost_d_rho(self, u, rho):
        return u / (self.u_max * self.rho_jam) + 0.0 * rho

    def _cost_d_u(self, u, rho):
        return u / self.u_max**2 - 1.0 / self.u_max + rho / (self.u_max * self.rho_jam)

    def _cost_d_urho(self, u, rho):
        return np.full_like(np.asarray(u * rho, dtype=float), 1.0 / (self.u_max * self.rho_jam))

    def _unconstrained(self, p, rho):
        um = self.u_max
        a = um * (1.0 - rho / self.rho_jam - um * p)
        return a, np.full_like(a, -(um**2)), np.full_like(a, -um / self.rho_jam)


COST_MODELS: t.Dict[str, t.Type[CostModel]] = {
    cls.key: cls for cls in (LwrTrackingCost, SeparableCost, NonSeparableCost)
}


def make_cost_model(key: str, *, u_max: float = 1.0, rho_jam: float = 1.0) -> CostModel:
    """Build a cost model from its CLI key (``lwr``, ``separable``, ``nonseparable``)."""

    try:
        cls = COST_MODELS[key]
    except KeyError:
        raise ConfigurationError(
            f"unknown cost model {key!r}; expected one of {sorted(COST_MODELS)}", key="model"
        ) from None
    return cls(u_max=u_max, rho_jam=rho_jam)


def _scalar_or_array(value):
    value = np.asarray(value)
    return value.item() if value.ndim == 0 else value


def running_cost(model: CostModel, u, rho):
    """``f(u, rho)``.

    :raises ConstraintViolation: if ``u`` lies outside ``[0, u_max]``.
    """

    return _scalar_or_array(model.running_cost(u, rho))


def hamiltonian(model: CostModel, p, rho):
    """``f*(p, rho) = min over a in [0, u_max] of f(a, rho) + a * p``."""

    return _scalar_or_array(model.hamiltonian(p, rho))


def optimal_speed(model: CostModel, p, rho):
    """The minimizer ``f*_p(p, rho)``."""

    return _scalar_or_array(model.optimal_speed(p, rho))


def equilibrium_speed(model: CostModel, rho):
    """The myopic speed ``U(rho) = f*_p(0, rho)``."""

    return _scalar_or_array(model.equilibrium_speed(rho))


def calibration_report(model: CostModel, samples: int = 101) -> t.Dict[str, t.Any]:
    """Check the calibration conditions that tie a cost to a sensible speed curve.

    (i) ``f_urho(U(rho), rho) >= 0`` for ``rho`` in ``[0, rho_jam]``;
    (ii) ``f_u(u_max, 0) = 0``; (iii) ``f_u(0, rho_jam) = 0``.
    Diagnostic only; nothing in the solver depends on the outcome.
    """

    rho = np.linspace(0.0, model.rho_jam, samples)
    cross = model._cost_d_urho(model.equilibrium_speed(rho), rho)
    free_flow = float(model._cost_d_u(np.asarray(model.u_max), np.asarray(0.0)))
    jam = float(model._cost_d_u(np.asarray(0.0), np.asarray(model.rho_jam)))
    return {
        "monotone_speed": bool(np.all(cross >= -SPEED_SLACK)),
        "min_cross_derivative": float(np.min(cross)),
        "free_flow": abs(free_flow) <= SPEED_SLACK,
        "free_flow_residual": free_flow,
        "jam": abs(jam) <= SPEED_SLACK,
        "jam_residual": jam,
    }
