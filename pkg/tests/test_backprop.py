"""Adjoint solves and trajectory gradients checked against closed forms, dense solves and finite differences."""

import csv

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.testing import assert_allclose

from src.backprop.adjoint import AdjointSystem, adjoint_solve_pd, solve_adjoint, spectral_gap_probe
from src.backprop.gradcheck import (
    finite_difference,
    gradient_check,
    max_error,
    relative_error,
    write_gradient_report,
)
from src.backprop.gradients import (
    AdjointState,
    GradientBundle,
    LossGradient,
    backprop_contact_step,
    backprop_step,
    backprop_trajectory,
    differentiate,
)
from src.energy.materials import MaterialParams
from src.simulation.newton_solver import step_newton
from src.simulation.simulator import Simulator
from src.simulation.state import AdjointMethod, SimState, SolverConfig, SolverMethod
from src.sparse_core.assembly import eliminate
from src.tasks.scenes import build_scene
from src.utils.errors import InvalidArgumentError

STEPS = 3
H = 0.01
REFERENCE = SolverConfig(method=SolverMethod.NEWTON_CHOLESKY, tolerance=1e-11, max_iterations=200)


def dense_adjoint_matrix(scene, record):
    """A_N assembled densely with the record's fixed DoFs replaced by identity."""
    mask = scene.mesh.free_mask()
    mask[record.active.dofs] = False
    hessian = scene.energies.hessian(record.local)
    A_N = sp.diags(scene.mass.diagonal / record.h**2) + hessian
    return eliminate(A_N, ~mask).toarray(), mask


def linear_loss(rng, n):
    wx, wv = rng.standard_normal(n), rng.standard_normal(n)
    return wx, wv, lambda traj: float(wx @ traj.final.x + wv @ traj.final.v)


class TestParticleClosedForm:
    def test_gradients_match_closed_form(self, particle_setup, rng):
        n = particle_setup.scene.mesh.num_dofs
        N, h, m = particle_setup.steps, particle_setup.h, 0.125
        sim = particle_setup.simulator(SolverConfig(tolerance=1e-10))
        traj = sim.simulate(particle_setup.x0, particle_setup.v0, N)
        wx, wv = rng.standard_normal(n), rng.standard_normal(n)
        grad = differentiate(sim, traj, LossGradient.terminal(N, wx, wv))

        assert_allclose(grad.x0, wx, rtol=1e-10)
        assert_allclose(grad.v0, N * h * wx + wv, rtol=1e-10)
        for i in range(N):
            assert_allclose(grad.f_ext[i], (h**2 * (N - i) * wx + h * wv) / m, rtol=1e-10)
        assert_allclose(grad.material, 0.0)
        assert grad.actuation.shape == (N, 0)
        assert grad.converged

    def test_zero_loss_gradient_gives_zero(self, particle_setup):
        sim = particle_setup.simulator()
        traj = sim.simulate(particle_setup.x0, particle_setup.v0, 2)
        grad = differentiate(sim, traj, LossGradient.zeros(2, particle_setup.scene.mesh.num_dofs))
        assert grad.norm() == 0.0
        assert grad.adjoint_iterations == [0, 0]

    def test_zero_steps(self, particle_setup, rng):
        sim = particle_setup.simulator()
        traj = sim.simulate(particle_setup.x0, particle_setup.v0, 0)
        wx = rng.standard_normal(particle_setup.scene.mesh.num_dofs)
        grad = differentiate(sim, traj, LossGradient.terminal(0, wx))
        assert_allclose(grad.x0, wx)
        assert grad.f_ext.shape == (0, wx.shape[0])


class TestAdjointSolves:
    @pytest.fixture
    def beam_step(self, clamped_beam, tight_config, rng):
        sim = Simulator(clamped_beam, h=H, config=tight_config)
        mesh = clamped_beam.mesh
        v0 = 0.2 * rng.standard_normal(mesh.num_dofs)
        traj = sim.simulate(mesh.rest_vector, v0, 2)
        return sim, traj.records[-1]

    @pytest.mark.parametrize("method", list(AdjointMethod))
    def test_matches_dense_solve(self, beam_step, tight_config, rng, method):
        sim, record = beam_step
        scene = sim.scene
        b = rng.standard_normal(scene.mesh.num_dofs)
        result = adjoint_solve_pd(scene, sim.factor, record, b, tight_config, method)
        A_N, mask = dense_adjoint_matrix(scene, record)
        expected = np.linalg.solve(A_N, np.where(mask, b, 0.0))
        assert result.converged
        assert result.method is method
        assert_allclose(result.u, expected, rtol=1e-8, atol=1e-10 * np.abs(expected).max())
        assert_allclose(result.u[~mask], 0.0)

    def test_fixed_point_contracts(self, beam_step):
        sim, record = beam_step
        rho = spectral_gap_probe(sim.scene, sim.factor, record)
        assert 0.0 <= rho < 1.0

    def test_spectral_radius_matches_dense_eigenvalues(self, beam_step):
        sim, record = beam_step
        scene = sim.scene
        A = sim.factor.matrix.toarray()
        A_N, mask = dense_adjoint_matrix(scene, record)
        free = np.flatnonzero(mask)
        delta = (A - A_N)[np.ix_(free, free)]
        eigenvalues = sla.eigvals(np.linalg.solve(A[np.ix_(free, free)], delta))
        expected = float(np.abs(eigenvalues).max())
        rho = spectral_gap_probe(scene, sim.factor, record, iterations=200)
        assert rho == pytest.approx(expected, rel=0.05)

    def test_bfgs_needs_fewer_iterations_than_fixed_point(self, beam_step, tight_config, rng):
        sim, record = beam_step
        config = tight_config.model_copy(update={"adjoint_tolerance": 1e-8})
        system = AdjointSystem(sim.scene, sim.factor, record, config)
        b = rng.standard_normal(sim.scene.mesh.num_dofs)
        bfgs = solve_adjoint(system, b, config, AdjointMethod.BFGS)
        fixed = solve_adjoint(system, b, config, AdjointMethod.FIXED_POINT)
        assert bfgs.converged and fixed.converged
        assert not bfgs.degraded
        assert bfgs.iterations < fixed.iterations
        assert_allclose(bfgs.u, fixed.u, rtol=1e-6, atol=1e-7 * np.abs(fixed.u).max())

    def test_without_factor_uses_newton(self, beam_step, tight_config, rng):
        sim, record = beam_step
        system = AdjointSystem(sim.scene, None, record, tight_config)
        result = solve_adjoint(system, rng.standard_normal(sim.scene.mesh.num_dofs), tight_config)
        assert result.method is AdjointMethod.NEWTON

    def test_pd_solver_requires_factor(self, beam_step, tight_config):
        sim, record = beam_step
        with pytest.raises(InvalidArgumentError):
            adjoint_solve_pd(sim.scene, None, record, np.ones(sim.scene.mesh.num_dofs), tight_config)

    def test_zero_rhs_short_circuits(self, beam_step, tight_config):
        sim, record = beam_step
        result = adjoint_solve_pd(sim.scene, sim.factor, record, np.zeros(sim.scene.mesh.num_dofs), tight_config)
        assert result.iterations == 0
        assert not result.u.any()

    def test_wrong_rhs_size_rejected(self, beam_step, tight_config):
        sim, record = beam_step
        with pytest.raises(InvalidArgumentError):
            adjoint_solve_pd(sim.scene, sim.factor, record, np.ones(5), tight_config)


class TestSingleStepGradients:
    """One step differentiated against Newton re-solves with the same pinned set."""

    def _step_loss(self, scene, record, wx, wv, x=None, v=None, f=None):
        x = record.pre.x if x is None else x
        v = record.pre.v if v is None else v
        f = record.f_ext if f is None else f
        post = step_newton(scene, SimState(x=x, v=v, step=0), f, record.h, REFERENCE, record.actuation, record.active)
        assert post.converged
        return float(wx @ post.post.x + wv @ post.post.v)

    def _check(self, scene, record, analytic_state, contribution, wx, wv, dofs):
        fd_x = finite_difference(lambda x: self._step_loss(scene, record, wx, wv, x=x), record.pre.x, 1e-6, dofs)
        fd_v = finite_difference(lambda v: self._step_loss(scene, record, wx, wv, v=v), record.pre.v, 1e-6, dofs)
        fd_f = finite_difference(lambda f: self._step_loss(scene, record, wx, wv, f=f), record.f_ext, 1e-6, dofs)
        assert_allclose(analytic_state.dx[dofs], fd_x, rtol=1e-4, atol=1e-5 * np.abs(fd_x).max())
        assert_allclose(analytic_state.dv[dofs], fd_v, rtol=1e-4, atol=1e-5 * np.abs(fd_v).max())
        assert_allclose(contribution.f_ext[dofs], fd_f, rtol=1e-4, atol=1e-5 * np.abs(fd_f).max())

    def test_elastic_step(self, clamped_beam, tight_config, rng):
        sim = Simulator(clamped_beam, h=H, config=tight_config)
        mesh = clamped_beam.mesh
        traj = sim.simulate(mesh.rest_vector, 0.3 * rng.standard_normal(mesh.num_dofs), 2)
        record = traj.records[-1]
        wx, wv = rng.standard_normal(mesh.num_dofs), rng.standard_normal(mesh.num_dofs)
        adj, contribution = backprop_step(clamped_beam, sim.factor, record, AdjointState(wx, wv), tight_config)
        free = np.flatnonzero(mesh.free_mask())
        self._check(clamped_beam, record, adj, contribution, wx, wv, rng.choice(free, 6, replace=False))

    def test_contact_step_includes_pinned_dofs(self, resting_block_setup, tight_config, rng):
        sim = resting_block_setup.simulator(tight_config)
        traj = sim.simulate(resting_block_setup.x0, resting_block_setup.v0, 2)
        record = traj.records[-1]
        assert record.active.size > 0
        scene = sim.scene
        n = scene.mesh.num_dofs
        wx, wv = rng.standard_normal(n), rng.standard_normal(n)
        adj, contribution = backprop_contact_step(scene, sim.factor, record, AdjointState(wx, wv), tight_config)

        pinned = record.active.dofs
        free = np.setdiff1d(np.arange(n), pinned)
        dofs = np.concatenate([pinned[:3], rng.choice(free, 3, replace=False)])
        self._check(scene, record, adj, contribution, wx, wv, dofs)
        # Pinned DoFs do not respond to forces during the step
        assert_allclose(contribution.f_ext[pinned], 0.0)

    def test_plain_step_rejects_contact_record(self, resting_block_setup, tight_config):
        sim = resting_block_setup.simulator(tight_config)
        traj = sim.simulate(resting_block_setup.x0, resting_block_setup.v0, 1)
        n = sim.scene.mesh.num_dofs
        with pytest.raises(InvalidArgumentError):
            backprop_step(sim.scene, sim.factor, traj.records[0], AdjointState(np.ones(n), np.ones(n)), tight_config)


class TestTrajectoryGradients:
    @pytest.fixture
    def beam_rollout(self, clamped_beam, tight_config, rng):
        mesh = clamped_beam.mesh
        v0 = 0.3 * rng.standard_normal(mesh.num_dofs)
        wx, wv, loss = linear_loss(rng, mesh.num_dofs)

        def rollout(scene, x0=mesh.rest_vector, v=v0, f_ext=None):
            return Simulator(scene, h=H, config=REFERENCE).simulate(x0, v, STEPS, f_ext)

        sim = Simulator(clamped_beam, h=H, config=tight_config)
        traj = sim.simulate(mesh.rest_vector, v0, STEPS)
        grad = differentiate(sim, traj, LossGradient.terminal(STEPS, wx, wv))
        return grad, loss, rollout, v0

    def test_initial_velocity(self, beam_rollout, clamped_beam, rng):
        grad, loss, rollout, v0 = beam_rollout
        free = np.flatnonzero(clamped_beam.mesh.free_mask())
        dofs = rng.choice(free, 5, replace=False)
        rows = gradient_check(
            lambda v: loss(rollout(clamped_beam, v=v)), v0, grad.v0, eps=1e-6, indices=dofs, floor=1e-4
        )
        assert max_error(rows) < 1e-4

    def test_initial_position(self, beam_rollout, clamped_beam, rng):
        grad, loss, rollout, _ = beam_rollout
        mesh = clamped_beam.mesh
        dofs = rng.choice(np.flatnonzero(mesh.free_mask()), 5, replace=False)
        rows = gradient_check(
            lambda x: loss(rollout(clamped_beam, x0=x)), mesh.rest_vector, grad.x0, eps=1e-6, indices=dofs, floor=1e-4
        )
        assert max_error(rows) < 1e-4
        assert_allclose(grad.x0[mesh.dirichlet_dofs], 0.0)

    def test_external_forces(self, beam_rollout, clamped_beam, rng):
        grad, loss, rollout, _ = beam_rollout
        n = clamped_beam.mesh.num_dofs
        forces = np.zeros(STEPS * n)
        dofs = rng.choice(np.flatnonzero(np.tile(clamped_beam.mesh.free_mask(), STEPS)), 5, replace=False)
        rows = gradient_check(
            lambda f: loss(rollout(clamped_beam, f_ext=f.reshape(STEPS, n))),
            forces,
            grad.f_ext.ravel(),
            eps=1e-6,
            indices=dofs,
            floor=1e-4,
        )
        assert max_error(rows) < 1e-4

    def test_material_parameters(self, beam_rollout, clamped_beam):
        grad, loss, rollout, _ = beam_rollout
        material = clamped_beam.material
        theta = np.array([material.youngs_modulus, material.poissons_ratio])

        def func(p):
            return loss(rollout(clamped_beam.with_material(MaterialParams(youngs_modulus=p[0], poissons_ratio=p[1]))))

        rows = gradient_check(func, theta, grad.material, names=["youngs_modulus", "poissons_ratio"], eps=1e-6)
        assert max_error(rows) < 1e-4

    def test_contact_rollout_material_parameters(self, resting_block_setup, tight_config, rng):
        setup = resting_block_setup
        scene = setup.scene
        wx, wv, loss = linear_loss(rng, scene.mesh.num_dofs)
        sim = setup.simulator(tight_config)
        traj = sim.simulate(setup.x0, setup.v0, setup.steps)
        assert traj.converged
        assert all(r.active.size for r in traj.records)
        grad = differentiate(sim, traj, LossGradient.terminal(setup.steps, wx, wv))

        def func(p):
            material = MaterialParams(youngs_modulus=p[0], poissons_ratio=p[1])
            reference = Simulator(scene.with_material(material), h=setup.h, config=REFERENCE)
            return loss(reference.simulate(setup.x0, setup.v0, setup.steps))

        theta = np.array([scene.material.youngs_modulus, scene.material.poissons_ratio])
        rows = gradient_check(func, theta, grad.material, names=["youngs_modulus", "poissons_ratio"], eps=1e-5)
        assert max_error(rows) < 1e-3

    def test_actuation(self, tight_config, rng):
        setup = build_scene("tendon", steps=STEPS, youngs_modulus=1e4, poissons_ratio=0.3, muscle_stiffness=1e4)
        scene = setup.scene
        n = scene.mesh.num_dofs
        wx, wv, loss = linear_loss(rng, n)
        radii = np.tile([0.9, 1.0, 0.95, 1.05], (STEPS, 1))
        sim = Simulator(scene, h=setup.h, config=tight_config)
        traj = sim.simulate(setup.x0, setup.v0, STEPS, actuation=radii)
        grad = differentiate(sim, traj, LossGradient.terminal(STEPS, wx, wv))
        assert grad.actuation.shape == (STEPS, 4)

        def func(r):
            reference = Simulator(scene, h=setup.h, config=REFERENCE)
            return loss(reference.simulate(setup.x0, setup.v0, STEPS, actuation=r.reshape(STEPS, 4)))

        rows = gradient_check(func, radii.ravel(), grad.actuation.ravel(), eps=1e-6, floor=1e-4)
        assert max_error(rows) < 1e-4

    def test_adjoint_methods_agree(self, clamped_beam, tight_config, rng):
        n = clamped_beam.mesh.num_dofs
        sim = Simulator(clamped_beam, h=H, config=tight_config)
        traj = sim.simulate(clamped_beam.mesh.rest_vector, 0.3 * rng.standard_normal(n), STEPS)
        loss_grad = LossGradient.terminal(traj.steps, rng.standard_normal(n))
        bundles = {
            method: differentiate(sim, traj, loss_grad, tight_config.model_copy(update={"adjoint_method": method}))
            for method in AdjointMethod
        }
        reference = bundles[AdjointMethod.NEWTON]
        for bundle in bundles.values():
            assert_allclose(bundle.x0, reference.x0, rtol=1e-6, atol=1e-8 * np.abs(reference.x0).max())
            assert_allclose(bundle.material, reference.material, rtol=1e-6)

    def test_newton_forward_gradients_match_pd(self, clamped_beam, rng):
        mesh = clamped_beam.mesh
        wx = rng.standard_normal(mesh.num_dofs)
        x0, v0 = mesh.rest_vector, np.zeros(mesh.num_dofs)
        pd_config = SolverConfig(tolerance=1e-10, adjoint_tolerance=1e-12, max_iterations=2000)
        pd = Simulator(clamped_beam, h=H, config=pd_config)
        newton = Simulator(clamped_beam, h=H, config=REFERENCE)
        a = differentiate(pd, pd.simulate(x0, v0, STEPS), LossGradient.terminal(STEPS, wx))
        b = differentiate(newton, newton.simulate(x0, v0, STEPS), LossGradient.terminal(STEPS, wx))
        assert_allclose(a.v0, b.v0, rtol=1e-6, atol=1e-9 * np.abs(b.v0).max())
        assert newton.refresh_count == 0

    def test_backward_pass_is_timed(self, cantilever_setup, rng):
        sim = cantilever_setup.simulator()
        traj = sim.simulate(cantilever_setup.x0, cantilever_setup.v0, 2)
        grad = differentiate(sim, traj, LossGradient.terminal(2, rng.standard_normal(traj.initial.x.shape[0])))
        assert grad.timings["backward"] > 0.0
        assert "adjoint" in grad.timings
        assert len(grad.adjoint_iterations) == 2

    def test_explicit_factor_matches_simulator_wrapper(self, clamped_beam, tight_config, rng):
        mesh = clamped_beam.mesh
        sim = Simulator(clamped_beam, h=H, config=tight_config)
        traj = sim.simulate(mesh.rest_vector, 0.2 * rng.standard_normal(mesh.num_dofs), STEPS)
        loss_grad = LossGradient.terminal(STEPS, rng.standard_normal(mesh.num_dofs))
        direct = backprop_trajectory(sim.scene, sim.factor, traj, loss_grad)
        wrapped = differentiate(sim, traj, loss_grad)
        layout = ["x0", "v0", "f_ext", "youngs_modulus", "poissons_ratio"]
        assert_allclose(direct.flatten(layout), wrapped.flatten(layout), rtol=1e-12, atol=1e-14)

    def test_loss_gradient_shape_checked(self, cantilever_setup):
        sim = cantilever_setup.simulator()
        traj = sim.simulate(cantilever_setup.x0, cantilever_setup.v0, 2)
        with pytest.raises(InvalidArgumentError):
            differentiate(sim, traj, LossGradient.zeros(3, traj.initial.x.shape[0]))


class TestGradientBundle:
    def test_components_and_flatten(self):
        bundle = GradientBundle(
            x0=np.array([1.0, 2.0]),
            v0=np.array([3.0, 4.0]),
            f_ext=np.zeros((1, 2)),
            material=np.array([5.0, 6.0]),
            actuation=np.array([[7.0]]),
        )
        assert bundle.youngs_modulus == 5.0
        assert bundle.poissons_ratio == 6.0
        assert bundle.flatten(["poissons_ratio", "x0", "actuation"]).tolist() == [6.0, 1.0, 2.0, 7.0]
        with pytest.raises(InvalidArgumentError):
            bundle.component("density")


class TestGradcheckHelpers:
    def test_finite_difference_of_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        assert_allclose(finite_difference(lambda z: float(z @ z), x), 2.0 * x, rtol=1e-8)

    def test_step_scales_with_magnitude(self):
        calls = []
        finite_difference(lambda z: calls.append(z.copy()) or 0.0, np.array([100.0]), eps=1e-6)
        assert calls[0][0] - 100.0 == pytest.approx(1e-4)

    def test_relative_error_floor(self):
        assert_allclose(relative_error([1.0, 0.0], [1.1, 0.0], floor=0.0), [0.1 / 1.1, 0.0])
        assert relative_error([1e-12], [0.0], floor=1e-6)[0] == pytest.approx(1e-6)

    def test_detects_wrong_gradient(self):
        x = np.array([0.5, 1.5])
        rows = gradient_check(lambda z: float(np.sum(z**3)), x, 3.0 * x**2 * 1.1)
        assert max_error(rows) > 0.05
        rows = gradient_check(lambda z: float(np.sum(z**3)), x, 3.0 * x**2)
        assert max_error(rows) < 1e-6

    def test_report_columns(self, tmp_path):
        rows = gradient_check(lambda z: float(z @ z), np.ones(2), 2.0 * np.ones(2), names=["a", "b"])
        path = write_gradient_report(rows, tmp_path / "report.csv")
        with path.open() as fh:
            table = list(csv.DictReader(fh))
        assert [r["variable"] for r in table] == ["a", "b"]
        assert set(table[0]) == {"variable", "analytic", "finite_difference", "rel_error"}

    def test_bad_inputs_rejected(self):
        with pytest.raises(InvalidArgumentError):
            finite_difference(lambda z: 0.0, np.zeros(2), eps=0.0)
        with pytest.raises(InvalidArgumentError):
            gradient_check(lambda z: 0.0, np.zeros(2), np.zeros(3))
