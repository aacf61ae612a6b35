"""Reverse-mode gradients through whole trajectories.

One step maps (x_i, v_i, f_i, theta) to x_{i+1} by solving
(M/h^2)(x_{i+1} - y) = f_int(x_{i+1}, theta) with y = x_i + h v_i + h^2 M^-1 f_i,
and sets v_{i+1} = (x_{i+1} - x_i) / h. With b = dL/dx_{i+1} + dL/dv_{i+1} / h
and u = A_N^-1 b the step contributes

    dL/dx_i += (M/h^2) u - dL/dv_{i+1} / h
    dL/dv_i += M u / h
    dL/df_i  = u
    dL/dtheta += u^T df_int/dtheta

Active contact DoFs are pinned at x_i, so they additionally receive
(b - A_N u) on those DoFs. The active set itself carries no gradient.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.backprop.adjoint import AdjointResult, AdjointSystem, solve_adjoint
from src.energy.materials import lame_weight_derivatives
from src.simulation.scene import Scene
from src.simulation.simulator import Simulator
from src.simulation.state import SolverConfig, StepRecord, Trajectory
from src.simulation.timing import PhaseTimer, timed
from src.sparse_core.factor import SpdFactor
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)

BUNDLE_FIELDS = ("x0", "v0", "f_ext", "material", "youngs_modulus", "poissons_ratio", "actuation")


@dataclass
class AdjointState:
    """dL/dx_i and dL/dv_i carried backward in time."""

    dx: np.ndarray
    dv: np.ndarray

    def copy(self) -> "AdjointState":
        return AdjointState(self.dx.copy(), self.dv.copy())


@dataclass
class StepContribution:
    """Parameter gradients contributed by one step."""

    f_ext: np.ndarray
    material: np.ndarray
    actuation: np.ndarray
    adjoint: AdjointResult


@dataclass
class LossGradient:
    """Per-frame loss gradients, frames 0..N.

    Attributes:
        dx: (N + 1, 3n) dL/dx_k
        dv: (N + 1, 3n) dL/dv_k
    """

    dx: np.ndarray
    dv: np.ndarray

    @classmethod
    def zeros(cls, steps: int, num_dofs: int) -> "LossGradient":
        return cls(np.zeros((steps + 1, num_dofs)), np.zeros((steps + 1, num_dofs)))

    @classmethod
    def terminal(cls, steps: int, dx: np.ndarray, dv: Optional[np.ndarray] = None) -> "LossGradient":
        """Gradient of a loss that only reads the final frame."""
        dx = np.asarray(dx, dtype=float)
        grad = cls.zeros(steps, dx.shape[0])
        grad.dx[-1] = dx
        if dv is not None:
            grad.dv[-1] = np.asarray(dv, dtype=float)
        return grad

    @property
    def steps(self) -> int:
        return int(self.dx.shape[0]) - 1

    def __add__(self, other: "LossGradient") -> "LossGradient":
        return LossGradient(self.dx + other.dx, self.dv + other.dv)

    def scaled(self, factor: float) -> "LossGradient":
        return LossGradient(factor * self.dx, factor * self.dv)


@dataclass
class GradientBundle:
    """Gradients of a scalar loss with respect to every simulation input.

    Attributes:
        x0: dL/dx_0 (3n), zero on Dirichlet DoFs
        v0: dL/dv_0 (3n), zero on Dirichlet DoFs
        f_ext: (steps, 3n) dL/df_ext per step
        material: (2,) dL/d(E, nu)
        actuation: (steps, groups) dL/dr per step and muscle group
        adjoint_iterations: Adjoint iterations per step
        degraded_steps: Steps whose PD adjoint fell back to Newton
        timings: Wall-clock seconds per phase of the backward pass
    """

    x0: np.ndarray
    v0: np.ndarray
    f_ext: np.ndarray
    material: np.ndarray
    actuation: np.ndarray
    adjoint_iterations: List[int] = field(default_factory=list)
    degraded_steps: List[int] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def youngs_modulus(self) -> float:
        return float(self.material[0])

    @property
    def poissons_ratio(self) -> float:
        return float(self.material[1])

    @property
    def converged(self) -> bool:
        return not self.degraded_steps

    def component(self, name: str) -> np.ndarray:
        if name not in BUNDLE_FIELDS:
            raise InvalidArgumentError(f"Unknown gradient component '{name}', expected one of {BUNDLE_FIELDS}")
        if name == "youngs_modulus":
            return self.material[:1]
        if name == "poissons_ratio":
            return self.material[1:]
        return np.asarray(getattr(self, name))

    def flatten(self, layout: Sequence[str]) -> np.ndarray:
        """Concatenate the named components in ``layout`` order.

        Example:
            >>> bundle.flatten(["youngs_modulus", "poissons_ratio"])
            array([...])
        """
        parts = [self.component(name).ravel() for name in layout]
        return np.concatenate(parts) if parts else np.zeros(0)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten(BUNDLE_FIELDS[:4] + ("actuation",))))


def _material_gradient(scene: Scene, sensitivity: Dict[str, float]) -> np.ndarray:
    """Chain (corotated, volume) weight sensitivities onto (E, nu)."""
    weights = np.array([sensitivity["corotated"], sensitivity["volume"]])
    return weights @ lame_weight_derivatives(scene.material)


def _check_adjoint(adj: AdjointState, num_dofs: int, step: int) -> None:
    if adj.dx.shape != (num_dofs,) or adj.dv.shape != (num_dofs,):
        raise InvalidArgumentError(f"Adjoint state must have {num_dofs} entries per vector")
    if not (np.all(np.isfinite(adj.dx)) and np.all(np.isfinite(adj.dv))):
        raise NumericalFailureError("Adjoint state is not finite", step=step)


def _backprop(
    scene: Scene,
    factor: Optional[SpdFactor],
    record: StepRecord,
    adj_next: AdjointState,
    config: SolverConfig,
    timer: Optional[PhaseTimer],
) -> Tuple[AdjointState, StepContribution]:
    step = record.pre.step
    _check_adjoint(adj_next, scene.mesh.num_dofs, step)
    h = record.h

    with timed(timer, "adjoint"):
        system = AdjointSystem(scene, factor, record, config, timer)
        b = adj_next.dx + adj_next.dv / h
        try:
            result = solve_adjoint(system, b, config)
        except NumericalFailureError as e:
            if e.step is None:
                e.step = step
            logger.error(f"Adjoint solve failed at step {step}: {e}")
            raise
        u = result.u

        dx = system.mass_over_h2 * u - adj_next.dv / h
        dv = scene.mass.diagonal * u / h
        if record.active.size:
            pinned = record.active.dofs
            dx[pinned] += (b - system.apply_full(u))[pinned]
        dx[scene.mesh.dirichlet_dofs] = 0.0
        dv[scene.mesh.dirichlet_dofs] = 0.0

        energies = scene.energies
        material = _material_gradient(scene, energies.material_sensitivity(record.local, u))
        actuation = energies.actuation_sensitivity(record.local, u)

    logger.debug(
        f"Backprop step {step}: {result.iterations} adjoint iterations, rel={result.residual:.3e}"
    )
    return AdjointState(dx, dv), StepContribution(u.copy(), material, actuation, result)


def backprop_step(
    scene: Scene,
    factor: Optional[SpdFactor],
    record: StepRecord,
    adj_next: AdjointState,
    config: SolverConfig,
    timer: Optional[PhaseTimer] = None,
) -> Tuple[AdjointState, StepContribution]:
    """Pull the adjoint of x_{i+1}, v_{i+1} back through one contact-free step.

    Args:
        scene: Scene the record was simulated with
        factor: Prefactorized A (None for Newton forward runs)
        record: Forward step record
        adj_next: dL/dx_{i+1}, dL/dv_{i+1}
        config: Solver configuration of the adjoint solve
        timer: Optional phase timer

    Returns:
        Tuple[AdjointState, StepContribution]: dL/dx_i, dL/dv_i and the
            step's f_ext, material and actuation gradients

    Raises:
        InvalidArgumentError: If the record has active contacts
        NumericalFailureError: If the adjoint solve fails
    """
    if record.active.size:
        raise InvalidArgumentError("Record has active contacts; use backprop_contact_step")
    return _backprop(scene, factor, record, adj_next, config, timer)


def backprop_contact_step(
    scene: Scene,
    factor: Optional[SpdFactor],
    record: StepRecord,
    adj_next: AdjointState,
    config: SolverConfig,
    timer: Optional[PhaseTimer] = None,
) -> Tuple[AdjointState, StepContribution]:
    """Backprop through a step with pinned contact nodes.

    The adjoint solve runs on the same pinned operator as the forward
    corrector (the low-rank solve on the PD path). Records without active
    contacts take the plain path.
    """
    if not record.active.size:
        return backprop_step(scene, factor, record, adj_next, config, timer)
    if not scene.has_contact:
        raise InvalidArgumentError("Record has active contacts but the scene has no contact candidates")
    return _backprop(scene, factor, record, adj_next, config, timer)


def backprop_trajectory(
    scene: Scene,
    factor: Optional[SpdFactor],
    trajectory: Trajectory,
    loss_grad: LossGradient,
    config: Optional[SolverConfig] = None,
    timer: Optional[PhaseTimer] = None,
) -> GradientBundle:
    """Gradients of a loss with respect to x_0, v_0, f_ext, (E, nu) and actuation.

    Args:
        scene: Scene the trajectory was simulated with
        factor: Prefactorized A of the scene (None for Newton forward runs)
        trajectory: Forward rollout
        loss_grad: Per-frame dL/dx_k and dL/dv_k, frames 0..N
        config: Adjoint settings (defaults to the trajectory's config)
        timer: Optional phase timer

    Returns:
        GradientBundle: All input gradients
    """
    config = config or trajectory.config
    n = scene.mesh.num_dofs
    steps = trajectory.steps
    if loss_grad.dx.shape != (steps + 1, n) or loss_grad.dv.shape != (steps + 1, n):
        raise InvalidArgumentError(f"Loss gradient must have shape ({steps + 1}, {n}) per component")
    if not trajectory.converged:
        logger.warning("Backpropagating through a trajectory with non-converged steps")

    timer = timer or PhaseTimer()
    groups = scene.num_groups
    f_ext = np.zeros((steps, n))
    actuation = np.zeros((steps, groups))
    material = np.zeros(2)
    iterations = [0] * steps
    degraded = []

    start = time.perf_counter()
    adj = AdjointState(loss_grad.dx[steps].copy(), loss_grad.dv[steps].copy())
    for i in reversed(range(steps)):
        adj, contribution = backprop_contact_step(scene, factor, trajectory.records[i], adj, config, timer)
        adj.dx += loss_grad.dx[i]
        adj.dv += loss_grad.dv[i]
        f_ext[i] = contribution.f_ext
        material += contribution.material
        if groups:
            actuation[i] = contribution.actuation
        iterations[i] = contribution.adjoint.iterations
        if contribution.adjoint.degraded:
            degraded.append(i)
    elapsed = time.perf_counter() - start

    adj.dx[scene.mesh.dirichlet_dofs] = 0.0
    adj.dv[scene.mesh.dirichlet_dofs] = 0.0
    timings = timer.totals()
    timings["backward"] = elapsed
    if degraded:
        logger.warning(f"Adjoint fell back to Newton on {len(degraded)} steps")
    logger.info(f"Backpropagated {steps} steps in {elapsed:.3f}s ({sum(iterations)} adjoint iterations)")
    return GradientBundle(
        x0=adj.dx,
        v0=adj.dv,
        f_ext=f_ext,
        material=material,
        actuation=actuation,
        adjoint_iterations=iterations,
        degraded_steps=sorted(degraded),
        timings=timings,
    )


def differentiate(
    simulator: Simulator,
    trajectory: Trajectory,
    loss_grad: LossGradient,
    config: Optional[SolverConfig] = None,
) -> GradientBundle:
    """backprop_trajectory with the simulator's scene and factorization."""
    config = config or trajectory.config
    factor = None if config.method.is_newton else simulator.factor
    return backprop_trajectory(simulator.scene, factor, trajectory, loss_grad, config)
