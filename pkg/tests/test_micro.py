import itertools
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import solve_ivp, trapezoid

from mfg_traffic import (
    CarEnsemble,
    ConfigurationError,
    ControlSet,
    GaussianBump,
    KernelSpec,
    ScalarField,
    SolutionTriple,
    SpaceTimeGrid,
    best_response,
    construct_controls,
    driving_cost,
    epsilon_accuracy,
    make_cost_model,
    sample_initial_positions,
    smooth_density,
)
from mfg_traffic.micro import car_mass_for, driving_costs, track, trajectory_cost


def equally_spaced(num_cars, road_length):
    return (np.arange(num_cars) + 0.5) * road_length / num_cars


@pytest.mark.parametrize("width", [0.05, 0.1, 0.3])
def test_kernel_has_unit_mass(width):
    x = np.linspace(0.0, 1.0, 20001)
    values = KernelSpec(width)(x - 0.3, 1.0)

    assert trapezoid(values, x) == pytest.approx(1.0, abs=1e-6)
    assert KernelSpec(width).peak(1.0) == pytest.approx(values.max(), rel=1e-3)


def test_kernel_is_periodic():
    kernel = KernelSpec(0.2)

    assert_allclose(kernel(np.array([0.1, 0.4]), 1.0), kernel(np.array([1.1, -0.6]), 1.0))


def test_smooth_density_of_equally_spaced_cars():
    h = 0.05
    ensemble = CarEnsemble(equally_spaced(20, 1.0), 1.0, KernelSpec(2 * h))
    x = np.linspace(0.0, 1.0, 37)

    assert_allclose(smooth_density(ensemble, ensemble.positions, x), 1.0 / h, rtol=1e-8)


def test_smooth_density_carries_car_mass(rng):
    ensemble = CarEnsemble(rng.uniform(0, 2.0, size=7), 2.0, KernelSpec(0.1), car_mass=0.25)
    x = np.linspace(0.0, 2.0, 40001)

    assert trapezoid(smooth_density(ensemble, ensemble.positions, x), x) == pytest.approx(7 * 0.25, rel=1e-6)


def test_smooth_density_over_time_levels(rng):
    ensemble = CarEnsemble(rng.uniform(size=5), 1.0, KernelSpec(0.1))
    positions = rng.uniform(size=(3, 5))
    x = np.linspace(0.0, 1.0, 11)

    levels = smooth_density(ensemble, positions, x)
    assert levels.shape == (3, 11)
    assert_allclose(levels[1], smooth_density(ensemble, positions[1], x))


def test_smooth_density_curvature_is_bounded_by_the_kernel(rng):
    width, mass, num_cars = 0.05, 0.1, 10
    ensemble = CarEnsemble(rng.uniform(size=num_cars), 1.0, KernelSpec(width), car_mass=mass)
    h = 1e-3
    x = np.arange(0.0, 1.0, h)

    values = smooth_density(ensemble, ensemble.positions, x)
    second = (np.roll(values, -1) - 2.0 * values + np.roll(values, 1)) / h**2

    # |xi''| peaks at the kernel center.
    bound = num_cars * mass / (math.sqrt(2.0 * math.pi) * width**3)
    assert values.min() >= 0.0
    assert np.abs(second).max() <= bound * (1.0 + 1e-3)


def test_car_mass_conventions():
    assert car_mass_for("count", 10) == 1.0
    assert car_mass_for("fraction", 10) == pytest.approx(0.1)
    assert car_mass_for("matched", 10, initial_mass=0.5) == pytest.approx(0.05)

    with pytest.raises(ConfigurationError) as excinfo:
        car_mass_for("weighted", 10)
    assert excinfo.value.key == "micro.density_convention"


def test_ensemble_wraps_positions():
    ensemble = CarEnsemble(np.array([1.25, -0.25]), 1.0, KernelSpec(0.1))

    assert_allclose(ensemble.positions, [0.25, 0.75])
    assert ensemble.num_cars == 2
    assert CarEnsemble(np.array([0.5]), 1.0, KernelSpec(0.1), include_self=False).self_density() == 0.0


def test_ensemble_needs_cars():
    with pytest.raises(ValueError, match="at least one car"):
        CarEnsemble(np.array([]), 1.0, KernelSpec(0.1))


def test_quantile_sampling_of_uniform_density():
    positions = sample_initial_positions(4, lambda x: np.ones_like(x), 4.0)

    assert_allclose(positions, [0.5, 1.5, 2.5, 3.5], atol=1e-12)


def test_quantile_sampling_follows_density():
    bump = GaussianBump(0.05, 0.95, 0.1, 1.0)

    positions = sample_initial_positions(101, bump, 1.0)
    assert np.mean((positions > 1 / 3) & (positions < 2 / 3)) > 0.5
    assert np.all(np.diff(positions) > 0)

    # A single car sits at the median.
    assert sample_initial_positions(1, bump, 1.0)[0] == pytest.approx(0.5, abs=1e-9)


def test_seeded_sampling_is_reproducible():
    bump = GaussianBump(0.2, 0.8, 0.15, 1.0)

    first = sample_initial_positions(30, bump, 1.0, mode="seeded", seed=7)
    second = sample_initial_positions(30, bump, 1.0, mode="seeded", seed=7)
    assert_allclose(first, second)
    assert not np.allclose(first, sample_initial_positions(30, bump, 1.0, mode="seeded", seed=8))


def test_sampling_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        sample_initial_positions(3, lambda x: np.zeros_like(x), 1.0)
    with pytest.raises(ConfigurationError):
        sample_initial_positions(0, lambda x: np.ones_like(x), 1.0)
    with pytest.raises(ConfigurationError):
        sample_initial_positions(3, lambda x: np.ones_like(x), 1.0, mode="lattice")


def test_control_set_shapes(small_grid):
    with pytest.raises(ValueError, match="controls need"):
        ControlSet(small_grid, np.zeros((3, 2)), np.zeros((4, 2)))

    controls = ControlSet.from_speeds(small_grid, [0.1, 0.9], np.full((small_grid.num_steps, 2), 0.5))
    assert controls.num_cars == 2
    assert controls.positions.shape == (small_grid.num_steps + 1, 2)


def test_track_wraps_around_ring(small_grid):
    positions = track(small_grid, [0.9], np.ones((small_grid.num_steps, 1)))

    assert positions[-1, 0] == pytest.approx(0.4)
    assert np.all(positions < 1.0)


def test_construct_controls_under_uniform_speed(small_grid, constant_triple):
    mfe = constant_triple(small_grid, u=0.5)
    ensemble = CarEnsemble(np.array([0.1, 0.6, 0.8]), 1.0, KernelSpec(0.1))

    controls = construct_controls(mfe, ensemble)

    expected = np.mod(ensemble.positions[None, :] + 0.5 * small_grid.times()[:, None], 1.0)
    assert_allclose(controls.speeds, 0.5)
    assert_allclose(controls.positions, expected, atol=1e-14)


def test_constructed_trajectories_converge_at_first_order(constant_triple):
    def speed(x):
        return 0.5 + 0.25 * np.sin(2.0 * np.pi * x)

    x0 = np.array([0.05, 0.3, 0.55, 0.8])
    exact = solve_ivp(lambda _, x: speed(x), (0.0, 1.0), x0, rtol=1e-11, atol=1e-12).y[:, -1]
    ensemble = CarEnsemble(x0, 1.0, KernelSpec(0.1))

    errors = []
    for nt in (8, 16, 32):
        grid = SpaceTimeGrid(1.0, 1.0, 1024, nt)
        base = constant_triple(grid)
        u = np.tile(speed(grid.cell_centers()), (nt + 1, 1))
        mfe = SolutionTriple(
            rho=base.rho, u=ScalarField(grid, u, derived_last_level=True, name="u"), V=base.V
        )
        final = construct_controls(mfe, ensemble).positions[-1]
        gap = np.mod(final - exact + 0.5, 1.0) - 0.5
        errors.append(np.abs(gap).max())

    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios >= 1.5) & (ratios <= 2.5))


def test_construct_controls_rejects_other_ring(small_grid, constant_triple):
    ensemble = CarEnsemble(np.array([0.1]), 2.0, KernelSpec(0.1))

    with pytest.raises(ConfigurationError):
        construct_controls(constant_triple(small_grid), ensemble)


def test_standing_still_is_free(small_grid, rng):
    ensemble = CarEnsemble(rng.uniform(size=4), 1.0, KernelSpec(0.1), car_mass=0.25)
    controls = ControlSet.from_speeds(small_grid, ensemble.positions, np.zeros((small_grid.num_steps, 4)))

    costs = driving_costs(controls, ensemble, make_cost_model("nonseparable"))
    assert_allclose(costs, 0.0)


def test_perfect_tracking_is_free():
    grid = SpaceTimeGrid(10.0, 1.0, 40, 8)
    ensemble = CarEnsemble(equally_spaced(5, 10.0) ** 1.2 / 2, 10.0, KernelSpec(1.0), car_mass=0.2)
    model = make_cost_model("lwr")

    positions = np.empty((grid.num_steps + 1, 5))
    speeds = np.empty((grid.num_steps, 5))
    positions[0] = ensemble.positions
    for n in range(grid.num_steps):
        speeds[n] = 1.0 - smooth_density(ensemble, positions[n], positions[n])
        positions[n + 1] = np.mod(positions[n] + grid.dt * speeds[n], 10.0)
    controls = ControlSet(grid, speeds, positions)

    assert_allclose(driving_costs(controls, ensemble, model), 0.0, atol=1e-14)
    assert driving_cost(2, controls, ensemble, model) == pytest.approx(0.0, abs=1e-14)


def test_driving_cost_matches_batch(small_grid, rng):
    ensemble = CarEnsemble(rng.uniform(size=6), 1.0, KernelSpec(0.1), car_mass=1 / 6)
    controls = ControlSet.from_speeds(small_grid, ensemble.positions, rng.uniform(size=(small_grid.num_steps, 6)))
    model = make_cost_model("separable")

    batch = driving_costs(controls, ensemble, model, lambda x: x)
    for i in range(6):
        assert driving_cost(i, controls, ensemble, model, lambda x: x) == pytest.approx(batch[i], rel=1e-12)


def test_self_exclusion_lowers_separable_cost(small_grid, rng):
    positions = rng.uniform(size=3)
    speeds = np.full((small_grid.num_steps, 3), 0.5)
    model = make_cost_model("separable")
    costs = {}
    for include_self in (True, False):
        ensemble = CarEnsemble(positions, 1.0, KernelSpec(0.1), car_mass=1 / 3, include_self=include_self)
        controls = ControlSet.from_speeds(small_grid, positions, speeds)
        costs[include_self] = driving_costs(controls, ensemble, model)

    shift = KernelSpec(0.1).peak(1.0) / 3 * small_grid.horizon
    assert_allclose(costs[True] - costs[False], shift, rtol=1e-12)


def uniform_traffic():
    grid = SpaceTimeGrid(10.0, 1.0, 40, 8)
    ensemble = CarEnsemble(equally_spaced(20, 10.0), 10.0, KernelSpec(1.0), car_mass=0.25)
    controls = ControlSet.from_speeds(grid, ensemble.positions, np.full((grid.num_steps, 20), 0.5))
    return grid, ensemble, controls


def test_best_response_in_uniform_traffic():
    grid, ensemble, controls = uniform_traffic()
    model = make_cost_model("nonseparable")

    # Density 0.5 everywhere, so U = 0.5 and f(U, 0.5) = -1/8.
    reply = best_response(3, controls, ensemble, model, grid, guard_incumbent=False)
    assert reply.dp_improved
    assert_allclose(reply.speeds, 0.5, atol=1e-9)
    assert reply.cost == pytest.approx(-0.125, abs=1e-9)
    assert driving_cost(3, controls, ensemble, model) == pytest.approx(-0.125, abs=1e-9)

    report = epsilon_accuracy(controls, ensemble, model, grid)
    assert np.max(np.abs(report.epsilon)) <= 1e-9
    assert report.relative_defined


def test_best_response_needs_shared_clock():
    grid, ensemble, controls = uniform_traffic()

    with pytest.raises(ConfigurationError):
        best_response(0, controls, ensemble, make_cost_model("nonseparable"), grid.refined())


def test_best_response_matches_brute_force():
    grid = SpaceTimeGrid(1.0, 1.0, 8, 8)
    model = make_cost_model("separable")
    bump = GaussianBump(0.2, 0.8, 0.15, 1.0)
    ensemble = CarEnsemble(sample_initial_positions(4, bump, 1.0), 1.0, KernelSpec(0.25), car_mass=0.25)
    others = np.tile(ensemble.positions, (grid.num_steps + 1, 1))
    controls = ControlSet(grid, np.zeros((grid.num_steps, 4)), others)

    reply = best_response(1, controls, ensemble, model, grid, guard_incumbent=False)

    levels = np.linspace(0.0, 1.0, 9)
    brute = math.inf
    rest = np.delete(others, 1, axis=1)
    for choice in itertools.product(levels, repeat=4):
        speeds = np.repeat(choice, 2)
        path = track(grid, ensemble.positions[1], speeds)
        brute = min(brute, trajectory_cost(path, speeds, rest, ensemble, model, grid))

    # Unit curvature in u: quantized speeds miss the optimum by at most
    # spacing**2 / 8 per unit time, the DP path by dx**2.
    spacing = levels[1] - levels[0]
    tolerance = grid.horizon * (spacing**2 / 8 + grid.dx**2)
    assert abs(reply.cost - brute) <= tolerance


def test_incumbent_guard_never_loses(rng):
    grid = SpaceTimeGrid(1.0, 0.5, 16, 16)
    ensemble = CarEnsemble(rng.uniform(size=6), 1.0, KernelSpec(0.1), car_mass=1 / 6)
    controls = ControlSet.from_speeds(grid, ensemble.positions, rng.uniform(size=(grid.num_steps, 6)))
    model = make_cost_model("nonseparable")

    report = epsilon_accuracy(controls, ensemble, model, grid)

    assert np.all(report.epsilon >= -1e-12)
    assert np.all(report.cost_best_response <= report.cost_constructed + 1e-12)


def test_accuracy_is_permutation_invariant(small_grid, rng):
    positions = rng.uniform(size=5)
    speeds = rng.uniform(size=(small_grid.num_steps, 5))
    order = rng.permutation(5)
    model = make_cost_model("nonseparable")

    def accuracy(index):
        ensemble = CarEnsemble(positions[index], 1.0, KernelSpec(0.1), car_mass=0.2)
        controls = ControlSet.from_speeds(small_grid, ensemble.positions, speeds[:, index])
        return epsilon_accuracy(controls, ensemble, model, small_grid)

    base = accuracy(np.arange(5))
    permuted = accuracy(order)
    assert_allclose(permuted.epsilon, base.epsilon[order], atol=1e-12)
    assert permuted.max_ra == pytest.approx(base.max_ra, abs=1e-12)


def test_accuracy_without_costs(small_grid, rng, tmp_path):
    ensemble = CarEnsemble(rng.uniform(size=3), 1.0, KernelSpec(0.1), car_mass=1 / 3)
    controls = ControlSet.from_speeds(small_grid, ensemble.positions, np.zeros((small_grid.num_steps, 3)))

    report = epsilon_accuracy(controls, ensemble, make_cost_model("nonseparable"), small_grid)

    assert not report.relative_defined
    assert math.isnan(report.max_ra)
    assert math.isnan(report.mean_ra)

    path = tmp_path / "accuracy.csv"
    report.write_csv(path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["car_index", "cost_constructed", "cost_best_response", "epsilon"]
    assert len(frame) == 3


def test_speeding_toward_equilibrium_lowers_cost():
    grid, ensemble, controls = uniform_traffic()
    model = make_cost_model("nonseparable")
    costs = []
    for speed in (0.1, 0.3, 0.45):
        speeds = np.array(controls.speeds)
        speeds[:, 3] = speed
        costs.append(driving_cost(3, ControlSet.from_speeds(grid, ensemble.positions, speeds), ensemble, model))

    assert costs[0] > costs[1] > costs[2]


def test_accuracy_is_translation_equivariant(small_grid, rng):
    positions = rng.uniform(size=4)
    speeds = rng.uniform(size=(small_grid.num_steps, 4))
    shift = 3 * small_grid.dx
    model = make_cost_model("separable")

    def accuracy(offset):
        ensemble = CarEnsemble(positions + offset, 1.0, KernelSpec(0.15), car_mass=0.25)
        controls = ControlSet.from_speeds(small_grid, ensemble.positions, speeds)
        return controls, epsilon_accuracy(controls, ensemble, model, small_grid)

    base_controls, base = accuracy(0.0)
    shifted_controls, shifted = accuracy(shift)

    offset = np.mod(shifted_controls.positions - base_controls.positions, 1.0)
    assert_allclose(np.minimum(offset, 1.0 - offset), np.minimum(shift, 1.0 - shift), atol=1e-12)
    assert_allclose(shifted.cost_constructed, base.cost_constructed, atol=1e-12)
    assert_allclose(shifted.epsilon, base.epsilon, atol=1e-10)
    assert shifted.mean_ra == pytest.approx(base.mean_ra, abs=1e-10)
