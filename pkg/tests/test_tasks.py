"""Tests for losses, optimizers, decision-variable layouts and task drivers."""

import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from src.backprop.gradcheck import gradient_check, max_error
from src.simulation.state import SolverConfig
from src.tasks.losses import (
    LossKind,
    LossSpec,
    com_target,
    evaluate_loss,
    forward_progress,
    random_weights,
    trajectory_match,
    weighted_final_state,
)
from src.tasks.optimizers import HISTORY_COLUMNS, LossHistory, adam, lbfgs
from src.tasks.task import (
    OptimizerSpec,
    Task,
    TaskSpec,
    VariableKind,
    interpolate_knots,
    knot_weights,
    normalize_losses,
    random_baseline,
    run_system_id,
    run_task,
    sinusoid_actuation,
)
from src.utils.errors import InvalidArgumentError

REFERENCE = SolverConfig(method="newton_cholesky", tolerance=1e-11, max_iterations=200)
SOFT_TENDON = {"steps": 3, "youngs_modulus": 1e4, "poissons_ratio": 0.3, "muscle_stiffness": 1e4}


def rosenbrock(x):
    a, b = x
    value = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    grad = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return value, grad


def quadratic(center):
    center = np.asarray(center, dtype=float)
    return lambda x: (float(np.sum((x - center) ** 2)), 2.0 * (x - center))


def tendon_task(variables, **overrides):
    spec = TaskSpec(
        scene="tendon",
        scene_params=SOFT_TENDON,
        variables=variables,
        loss=LossSpec(kind="weighted_final_state", seed=3),
        solver=REFERENCE,
        random_samples=0,
        **overrides,
    )
    return Task(spec)


def check_task_gradient(task, variables):
    evaluation = task.evaluate(variables)
    rows = gradient_check(
        lambda v: task.evaluate(v, with_grad=False).loss, variables, evaluation.grad, eps=1e-6, floor=1e-4
    )
    assert max_error(rows) < 1e-3, rows


class TestOptimizers:
    def test_lbfgs_solves_rosenbrock(self):
        result = lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iterations=200)
        assert_allclose(result.x, [1.0, 1.0], atol=1e-4)
        assert result.loss < 1e-8
        assert len(result.history) >= result.iterations

    def test_lbfgs_respects_bounds(self):
        result = lbfgs(quadratic([3.0, -3.0]), np.zeros(2), bounds=[(0.0, 1.0), (-1.0, 1.0)])
        assert_allclose(result.x, [1.0, -1.0], atol=1e-8)

    def test_lbfgs_without_iterations_evaluates_start(self):
        result = lbfgs(quadratic([1.0]), np.array([0.0]), max_iterations=0)
        assert len(result.history) == 1
        assert result.loss == pytest.approx(1.0)
        assert result.iterations == 0

    def test_lbfgs_bound_count_checked(self):
        with pytest.raises(InvalidArgumentError):
            lbfgs(quadratic([1.0, 1.0]), np.zeros(2), bounds=[(0.0, 1.0)])

    def test_adam_approaches_minimum(self):
        result = adam(quadratic([1.0, -2.0]), np.zeros(2), step_size=0.1, iterations=500)
        assert result.loss < 1e-2
        assert len(result.history) == 501

    def test_adam_zero_gradient_keeps_point(self):
        result = adam(lambda x: (2.0, np.zeros_like(x)), np.array([0.3, 0.4]), iterations=10)
        assert_allclose(result.x, [0.3, 0.4])
        assert result.loss == 2.0

    def test_adam_projects_onto_bounds(self):
        result = adam(quadratic([5.0]), np.array([0.0]), step_size=0.5, iterations=50, bounds=[(0.0, 1.0)])
        assert 0.0 <= result.x[0] <= 1.0
        assert result.x[0] == pytest.approx(1.0, abs=1e-6)

    def test_adam_without_finite_loss_returns_last_iterate(self):
        result = adam(lambda x: (np.inf, np.zeros_like(x)), np.array([0.2, -0.1]), iterations=5)
        assert_allclose(result.x, [0.2, -0.1])
        assert result.loss == np.inf
        assert not result.success
        assert len(result.history) == 6

    @pytest.mark.parametrize("kwargs", [{"step_size": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}])
    def test_adam_rejects_bad_settings(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            adam(quadratic([0.0]), np.zeros(1), **kwargs)

    def test_history_tracks_best(self, tmp_path):
        history = LossHistory()
        for loss in [3.0, 1.0, 2.0, np.inf, 0.5]:
            history.record(np.array([loss]), loss, np.array([1.0, 1.0]))
        assert history.best_loss == 0.5
        assert_allclose(history.best_so_far(), [3.0, 1.0, 1.0, 1.0, 0.5])
        path = history.write_csv(tmp_path / "history.csv")
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == HISTORY_COLUMNS
        assert len(rows) == 6


class TestActuationSchedules:
    def test_knot_weights_interpolate(self):
        weights = knot_weights(3, 5)
        assert weights.shape == (5, 3)
        assert_allclose(weights.sum(axis=1), 1.0)
        assert_allclose(weights[0], [1.0, 0.0, 0.0])
        assert_allclose(weights[-1], [0.0, 0.0, 1.0])
        assert_allclose(weights[2], [0.0, 1.0, 0.0])

    def test_single_knot_is_constant(self):
        assert_allclose(knot_weights(1, 4), np.ones((4, 1)))
        assert knot_weights(3, 0).shape == (0, 3)

    def test_interpolate_knots(self):
        values = interpolate_knots(np.array([[0.0, 1.0], [1.0, 1.0]]), 5)
        assert_allclose(values[:, 0], [0.0, 0.25, 0.5, 0.75, 1.0])
        assert_allclose(values[:, 1], 1.0)

    def test_bad_knots_rejected(self):
        with pytest.raises(InvalidArgumentError):
            knot_weights(0, 3)
        with pytest.raises(InvalidArgumentError):
            interpolate_knots(np.zeros(3), 3)

    def test_sinusoid_range_and_phase(self):
        a = sinusoid_actuation(np.array([0.2, 4.0, np.pi / 2.0]), 50, 0.01, groups=2)
        assert a.shape == (50, 2)
        assert a.min() >= 0.0 and a.max() <= 0.2 + 1e-12
        assert a[0, 0] == pytest.approx(0.1)
        assert a[0, 1] == pytest.approx(0.2)

    def test_sinusoid_parameter_count_checked(self):
        with pytest.raises(InvalidArgumentError):
            sinusoid_actuation(np.array([0.1, 1.0]), 5, 0.01)


class TestLosses:
    @pytest.fixture
    def trajectory(self, particle_setup):
        setup = particle_setup
        return setup.simulator().simulate(setup.x0, setup.v0, setup.steps)

    def test_random_weights_are_seeded_unit_vectors(self):
        wx, wv = random_weights(7, 24)
        assert np.linalg.norm(wx) == pytest.approx(1.0)
        assert np.linalg.norm(wv) == pytest.approx(1.0)
        assert_allclose(random_weights(7, 24)[0], wx)

    def test_weighted_final_state(self, trajectory):
        n = trajectory.positions.shape[1]
        wx, wv = random_weights(1, n)
        value, grad = weighted_final_state(trajectory, wx, wv)
        assert value == pytest.approx(wx @ trajectory.final.x + wv @ trajectory.final.v)
        assert_allclose(grad.dx[-1], wx)
        assert not np.any(grad.dx[:-1])

    def test_per_step_sums_frames(self, trajectory):
        n = trajectory.positions.shape[1]
        wx, wv = random_weights(1, n)
        value, grad = weighted_final_state(trajectory, wx, wv, per_step=True)
        expected = sum(wx @ trajectory.positions[k] + wv @ trajectory.velocities[k] for k in range(1, 6))
        assert value == pytest.approx(expected)
        assert not np.any(grad.dv[0])
        assert_allclose(grad.dv[1:], np.tile(wv, (5, 1)))

    def test_com_target(self, particle_setup, trajectory):
        scene = particle_setup.scene
        target = np.array([0.1, 0.2, 0.3])
        value, grad = com_target(scene, trajectory, target)
        diff = scene.center_of_mass(trajectory.final.x) - target
        assert value == pytest.approx(diff @ diff)
        # Eight equal node masses
        assert_allclose(grad.dx[-1].reshape(-1, 3), np.tile(2.0 * diff / 8.0, (8, 1)))

    def test_com_target_tracks_node(self, particle_setup, trajectory):
        value, grad = com_target(particle_setup.scene, trajectory, np.zeros(3), node=5)
        point = trajectory.final.x.reshape(-1, 3)[5]
        assert value == pytest.approx(point @ point)
        assert_allclose(grad.dx[-1][15:18], 2.0 * point)
        with pytest.raises(InvalidArgumentError):
            com_target(particle_setup.scene, trajectory, np.zeros(3), node=8)

    def test_forward_progress(self, particle_setup, trajectory):
        value, _ = forward_progress(particle_setup.scene, trajectory, axis=0, up_weight=0.5)
        com = particle_setup.scene.center_of_mass(trajectory.final.x)
        assert value == pytest.approx(-com[0] - 0.5 * com[2])

    def test_trajectory_match(self, trajectory):
        reference = trajectory.positions.copy()
        value, grad = trajectory_match(trajectory, reference)
        assert value == 0.0 and not np.any(grad.dx)
        reference[1:] += 0.01
        reference[0] += 1.0
        value, grad = trajectory_match(trajectory, reference)
        assert value == pytest.approx(1e-4 * reference[1:].size)
        assert not np.any(grad.dx[0])
        with pytest.raises(InvalidArgumentError):
            trajectory_match(trajectory, reference[1:])

    def test_missing_loss_inputs_rejected(self, particle_setup, trajectory):
        with pytest.raises(InvalidArgumentError):
            evaluate_loss(LossSpec(kind=LossKind.COM_TARGET), particle_setup.scene, trajectory)
        with pytest.raises(InvalidArgumentError):
            evaluate_loss(LossSpec(kind=LossKind.TRAJECTORY_MATCH), particle_setup.scene, trajectory)

    def test_loss_spec_forbids_unknown_keys(self):
        with pytest.raises(ValidationError):
            LossSpec(kind="com_target", weight=2.0)


class TestTaskLayouts:
    def test_material_gradient(self):
        task = tendon_task(VariableKind.MATERIAL)
        check_task_gradient(task, np.array([np.log(1.5e4), 0.3]))

    def test_actuation_gradient(self):
        task = tendon_task(VariableKind.ACTUATION)
        assert task.num_variables == 4
        check_task_gradient(task, np.array([0.1, 0.2, 0.05, 0.15]))

    def test_knot_gradient(self):
        task = tendon_task(VariableKind.ACTUATION_KNOTS, knots=2)
        check_task_gradient(task, np.linspace(0.05, 0.25, 8))

    def test_sinusoid_gradient(self):
        task = tendon_task(VariableKind.SINUSOID)
        check_task_gradient(task, np.array([0.1, 5.0, 1.0]))

    def test_initial_state_gradient(self):
        spec = TaskSpec(
            scene="particle",
            scene_params={"steps": 4},
            variables="initial_state",
            loss=LossSpec(kind="com_target", target=[0.1, 0.0, 0.2]),
            random_samples=0,
        )
        task = Task(spec)
        check_task_gradient(task, np.array([0.01, -0.02, 0.05, 0.1, 0.2, -0.3]))

    def test_activations_map_to_radii(self):
        task = tendon_task(VariableKind.ACTUATION)
        inputs = task.inputs(np.array([0.1, 0.0, 0.3, 0.2]))
        assert_allclose(inputs.actuation, np.tile([0.9, 1.0, 0.7, 0.8], (3, 1)))

    def test_actuation_needs_muscles(self):
        with pytest.raises(InvalidArgumentError):
            Task(TaskSpec(scene="particle", variables="actuation", random_samples=0))

    def test_layout_sizes_checked(self):
        with pytest.raises(InvalidArgumentError):
            Task(TaskSpec(scene="particle", variables="initial_state", initial=[0.0, 0.0], random_samples=0))
        with pytest.raises(InvalidArgumentError):
            Task(TaskSpec(scene="particle", variables="initial_state", bounds=[(0.0, 1.0)], random_samples=0))

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ValidationError):
            TaskSpec(scene="particle", variables="initial_state", bounds=[(1.0, 0.0)] * 6)

    def test_out_of_bounds_variables_rejected(self):
        task = Task(TaskSpec(scene="particle", variables="initial_state", random_samples=0))
        with pytest.raises(InvalidArgumentError):
            task.evaluate(np.array([0.0, 0.0, -1.0, 0.0, 0.0, 0.0]))
        with pytest.raises(InvalidArgumentError):
            task.inputs(np.zeros(5))


class TestTaskDrivers:
    def test_normalize_losses(self):
        assert_allclose(normalize_losses(np.array([4.0, 2.0, 3.0]), 4.0, 2.0), [1.0, 0.0, 0.5])
        with pytest.raises(InvalidArgumentError):
            normalize_losses(np.ones(2), 1.0, 1.0)

    def test_random_baseline_samples_within_bounds(self):
        spec = TaskSpec(
            scene="particle",
            scene_params={"steps": 3},
            variables="initial_state",
            loss=LossSpec(kind="com_target", target=[0.05, 0.05, 0.1]),
        )
        task = Task(spec)
        baseline = random_baseline(task, samples=5, seed=2)
        lo, hi = np.array(task.bounds()).T
        assert baseline.samples.shape == (5, 6)
        assert np.all(baseline.samples >= lo) and np.all(baseline.samples <= hi)
        assert baseline.best <= baseline.mean
        with pytest.raises(InvalidArgumentError):
            random_baseline(task, samples=0)

    def test_inverse_design_reaches_generated_target(self):
        spec = TaskSpec(
            scene="particle",
            scene_params={"steps": 5},
            variables="initial_state",
            loss=LossSpec(kind="com_target"),
            reference=[0.05, -0.05, 0.1, 0.2, 0.0, 0.3],
            optimizer=OptimizerSpec(max_iterations=50),
            random_samples=4,
        )
        task = Task(spec)
        assert task.target is not None
        result = run_task(task)
        assert result.loss < 1e-8
        assert result.initial_loss > result.loss
        assert result.normalized["reference"] == 0.0
        assert result.normalized["normalized_optimized"] == pytest.approx(0.0, abs=1e-4)
        assert result.trajectory.steps == 5
        assert result.material is None

    def test_system_identification_reduces_loss(self):
        spec = TaskSpec(
            scene="tendon",
            scene_params={**SOFT_TENDON, "steps": 4},
            variables="material",
            loss=LossSpec(kind="trajectory_match"),
            solver=REFERENCE,
            reference=[float(np.log(2e4)), 0.3],
            initial=[float(np.log(1e4)), 0.3],
            optimizer=OptimizerSpec(max_iterations=10, gtol=1e-14, ftol=1e-15),
            random_samples=0,
        )
        task = Task(spec)
        result = run_task(task)
        assert result.loss < 0.1 * result.initial_loss
        assert result.material is not None

    def test_plant_system_identification_recovers_material(self):
        spec = TaskSpec(
            scene="plant_analog",
            scene_params={"steps": 10},
            variables="material",
            loss=LossSpec(kind="trajectory_match"),
            solver=REFERENCE,
            reference=[float(np.log(2e4)), 0.3],
            initial=[float(np.log(1e4)), 0.4],
            optimizer=OptimizerSpec(max_iterations=60, gtol=1e-14, ftol=1e-15),
            random_samples=0,
        )
        result = run_task(Task(spec))
        assert result.material.youngs_modulus == pytest.approx(2e4, rel=0.05)
        assert result.material.poissons_ratio == pytest.approx(0.3, abs=0.05)
        assert result.loss <= 1e-4 * result.initial_loss

    def test_bunny_inverse_design_beats_random_samples(self):
        dx = 0.01
        spec = TaskSpec(
            scene="bunny_analog",
            scene_params={"steps": 6, "youngs_modulus": 1e4, "poissons_ratio": 0.3},
            variables="initial_state",
            loss=LossSpec(kind="com_target"),
            solver=REFERENCE,
            bounds=[(-2 * dx, 2 * dx), (-2 * dx, 2 * dx), (0.0, 2 * dx), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 0.0)],
            reference=[0.01, -0.005, 0.005, 0.4, -0.2, -0.5],
            optimizer=OptimizerSpec(max_iterations=30),
            random_samples=16,
            seed=4,
        )
        result = run_task(Task(spec))
        assert result.normalized["random_best"] > 0.0
        assert result.loss < result.normalized["random_best"]

    def test_crawler_moves_farther_than_passive(self):
        spec = TaskSpec(
            scene="crawler",
            scene_params={"steps": 10},
            variables="sinusoid",
            loss=LossSpec(kind="forward_progress", axis=0),
            solver=REFERENCE,
            optimizer=OptimizerSpec(max_iterations=10),
            random_samples=16,
            seed=1,
        )
        task = Task(spec)
        scene = task.setup.scene
        start = scene.center_of_mass(task.setup.x0)[0]
        passive = scene.center_of_mass(task.rollout(np.array([0.0, 5.0, 0.0])).final.x)[0] - start
        result = run_task(task)
        distance = scene.center_of_mass(result.trajectory.final.x)[0] - start
        assert distance > 0.0
        assert distance > 2.0 * abs(passive)

    def test_system_identification_needs_reference(self):
        task = tendon_task(VariableKind.MATERIAL)
        with pytest.raises(InvalidArgumentError):
            run_system_id(task)

    def test_trajectory_optimization_improves_on_start(self):
        spec = TaskSpec(
            scene="tendon",
            scene_params=SOFT_TENDON,
            variables="actuation",
            loss=LossSpec(kind="forward_progress", axis=0),
            solver=REFERENCE,
            optimizer=OptimizerSpec(kind="adam", max_iterations=5, step_size=0.02),
            initial=[0.1, 0.1, 0.1, 0.1],
            random_samples=0,
        )
        result = run_task(Task(spec))
        assert result.loss <= result.initial_loss
        assert len(result.optimize.history) == 6
        assert result.normalized == {}
