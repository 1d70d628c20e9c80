import numpy as np
import pytest

from mfg_traffic import (
    GaussianBump,
    ProblemSpec,
    ScalarField,
    SolutionTriple,
    SpaceTimeGrid,
    make_cost_model,
)
from mfg_traffic.discretization import UnknownLayout


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_grid():
    return SpaceTimeGrid(1.0, 0.5, 16, 16)


@pytest.fixture
def problem():
    """Factory for the Gaussian-bump problem on the unit ring."""

    def problem(
        model="lwr",
        *,
        nx=30,
        nt=120,
        horizon=3.0,
        stencil="upwind",
        rho_a=0.05,
        rho_b=0.95,
        gamma=0.1,
        terminal_cost=None,
    ):
        grid = SpaceTimeGrid(1.0, horizon, nx, nt)
        kwargs = {} if terminal_cost is None else {"terminal_cost": terminal_cost}
        return ProblemSpec(
            grid=grid,
            cost=make_cost_model(model),
            initial_density=GaussianBump(rho_a, rho_b, gamma, 1.0),
            stencil=stencil,
            **kwargs,
        )

    return problem


@pytest.fixture
def uniform_problem():
    def uniform_problem(model="separable", *, density=0.3, nx=16, nt=16, horizon=0.5, stencil="upwind"):
        return ProblemSpec(
            grid=SpaceTimeGrid(1.0, horizon, nx, nt),
            cost=make_cost_model(model),
            initial_density=lambda x: np.full_like(x, density),
            stencil=stencil,
        )

    return uniform_problem


@pytest.fixture
def interior_unknowns(*, rng):
    """Random unknowns whose costates stay in 0.05 <= |p| <= 0.15 and densities in [0.2, 0.4].

    Every speed minimizer is then at least 0.05 away from a clamp kink.
    """

    def interior_unknowns(grid, stencil="upwind"):
        nx, nt = grid.num_cells, grid.num_steps
        rho = rng.uniform(0.2, 0.4, size=(nt + 1, nx))
        u = rng.uniform(0.0, 1.0, size=(nt, nx))
        V = np.empty((nt + 1, nx))
        for n in range(nt + 1):
            magnitudes = rng.uniform(0.05, 0.15, size=nx // 2)
            slopes = rng.permutation(np.concatenate([magnitudes, -magnitudes]))
            V[n] = np.concatenate([[0.0], np.cumsum(slopes[:-1] * grid.dx)]) + rng.normal()
        w = np.concatenate([rho.ravel(), u.ravel(), V.ravel()])
        assert w.size == UnknownLayout(grid).size
        return w

    return interior_unknowns


@pytest.fixture
def constant_triple():
    def constant_triple(grid, rho=0.3, u=0.7, V=0.0, v_stagger=0.0):
        return SolutionTriple(
            rho=ScalarField.constant(grid, rho, name="rho"),
            u=ScalarField.constant(grid, u, derived_last_level=True, name="u"),
            V=ScalarField.constant(grid, V, stagger=v_stagger, name="V"),
        )

    return constant_triple
