"""Optimization tasks: decision variables, loss evaluation and drivers.

Decision variables are mapped onto simulation inputs and the GradientBundle
is chained back onto them:

* material: (log E, nu)
* initial_state: rigid offset of x_0 and v_0 (6 values)
* actuation: one constant activation per muscle group
* actuation_knots: activations at knots, linearly interpolated over time
* sinusoid: (amplitude, frequency, phase shift) of a per-group sine controller

Activations a map to muscle radii r = 1 - a, so a = 0 leaves fibers at rest.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.backprop.gradients import GradientBundle, differentiate
from src.energy.materials import MaterialParams
from src.simulation.simulator import Simulator
from src.simulation.state import SolverConfig, Trajectory
from src.tasks.losses import LossKind, LossSpec, evaluate_loss
from src.tasks.optimizers import OptimizeResult, adam, lbfgs
from src.tasks.scenes import SceneSetup, build_scene
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)

RANDOM_SAMPLES = 16


class VariableKind(str, Enum):
    MATERIAL = "material"
    INITIAL_STATE = "initial_state"
    ACTUATION = "actuation"
    ACTUATION_KNOTS = "actuation_knots"
    SINUSOID = "sinusoid"


class OptimizerKind(str, Enum):
    LBFGS = "lbfgs"
    ADAM = "adam"


class OptimizerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: OptimizerKind = OptimizerKind.LBFGS
    max_iterations: int = Field(default=50, ge=0)
    gtol: float = Field(default=1e-8, gt=0.0)
    ftol: float = Field(default=1e-12, gt=0.0)
    step_size: float = Field(default=1e-2, gt=0.0)


class TaskSpec(BaseModel):
    """An optimization problem over one catalog scene.

    Attributes:
        scene: Catalog scene id
        scene_params: Keyword arguments of the scene builder
        variables: Decision-variable layout
        loss: Loss configuration
        optimizer: Optimizer and its settings
        solver: Forward and adjoint solver settings
        bounds: (lo, hi) per decision variable (layout defaults when omitted)
        initial: Initial decision variables (layout defaults when omitted)
        reference: Decision variables that generate the self-consistent target
        knots: Knot count of actuation_knots
        max_activation: Upper bound on muscle activation
        random_samples: Random solutions of the normalization baseline (0 disables it)
        seed: Seed of the random baseline and multi-start
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    scene: str
    scene_params: Dict[str, Any] = Field(default_factory=dict)
    variables: VariableKind
    loss: LossSpec = Field(default_factory=LossSpec)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    bounds: Optional[List[Tuple[float, float]]] = None
    initial: Optional[List[float]] = None
    reference: Optional[List[float]] = None
    knots: int = Field(default=20, ge=1)
    max_activation: float = Field(default=0.3, gt=0.0, le=1.0)
    random_samples: int = Field(default=RANDOM_SAMPLES, ge=0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "TaskSpec":
        for lo, hi in self.bounds or []:
            if lo > hi:
                raise ValueError(f"Bound ({lo}, {hi}) has lo > hi")
        return self


def knot_weights(num_knots: int, steps: int) -> np.ndarray:
    """(steps, num_knots) linear interpolation matrix over evenly spaced knots."""
    if num_knots < 1 or steps < 0:
        raise InvalidArgumentError("Need at least one knot and a non-negative step count")
    weights = np.zeros((steps, num_knots))
    if num_knots == 1 or steps == 0:
        weights[:, 0] = 1.0
        return weights
    t = np.arange(steps) * (num_knots - 1) / max(steps - 1, 1)
    left = np.minimum(np.floor(t).astype(int), num_knots - 2)
    frac = t - left
    weights[np.arange(steps), left] = 1.0 - frac
    weights[np.arange(steps), left + 1] = frac
    return weights


def interpolate_knots(knots: np.ndarray, steps: int) -> np.ndarray:
    """Linearly interpolate (K, groups) knot values onto ``steps`` time steps."""
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 2:
        raise InvalidArgumentError("Knots must be a (knots, groups) array")
    return knot_weights(knots.shape[0], steps) @ knots


def _sinusoid_phases(params: np.ndarray, steps: int, h: float, groups: int) -> np.ndarray:
    _, frequency, shift = params
    t = np.arange(steps) * h
    return 2.0 * np.pi * frequency * t[:, None] + shift * np.arange(groups)[None, :]


def sinusoid_actuation(params: np.ndarray, steps: int, h: float, groups: int = 2) -> np.ndarray:
    """Activations A (1 + sin(2 pi f t + g phi)) / 2 per step and group g.

    Args:
        params: (amplitude A, frequency f in Hz, phase shift phi between groups)
        steps: Number of time steps
        h: Time step in seconds
        groups: Number of muscle groups
    """
    params = np.asarray(params, dtype=float)
    if params.shape != (3,):
        raise InvalidArgumentError("Sinusoid controller takes (amplitude, frequency, phase shift)")
    return 0.5 * params[0] * (1.0 + np.sin(_sinusoid_phases(params, steps, h, groups)))


def _sinusoid_gradient(params: np.ndarray, steps: int, h: float, grad_a: np.ndarray) -> np.ndarray:
    groups = grad_a.shape[1]
    phases = _sinusoid_phases(params, steps, h, groups)
    t = np.arange(steps) * h
    d_amplitude = 0.5 * (1.0 + np.sin(phases))
    d_phase = 0.5 * params[0] * np.cos(phases)
    return np.array(
        [
            np.sum(grad_a * d_amplitude),
            np.sum(grad_a * d_phase * 2.0 * np.pi * t[:, None]),
            np.sum(grad_a * d_phase * np.arange(groups)[None, :]),
        ]
    )


@dataclass
class RolloutInputs:
    simulator: Simulator
    x0: np.ndarray
    v0: np.ndarray
    actuation: Optional[np.ndarray]


@dataclass
class Evaluation:
    """Loss and decision-variable gradient at one point."""

    loss: float
    grad: np.ndarray
    converged: bool
    trajectory: Trajectory
    bundle: Optional[GradientBundle] = None


class Task:
    """Runtime state of a TaskSpec: scene, layout and self-generated target."""

    def __init__(self, spec: TaskSpec, setup: Optional[SceneSetup] = None):
        self.spec = spec
        self.setup = setup or build_scene(spec.scene, **spec.scene_params)
        self.simulator = self.setup.simulator(spec.solver)
        self.base_material = self.setup.scene.material
        self.reference_positions: Optional[np.ndarray] = None
        self.target: Optional[np.ndarray] = None
        self._check_layout()
        self._prepare_reference()

    @property
    def steps(self) -> int:
        return self.setup.steps

    @property
    def groups(self) -> int:
        return self.setup.num_groups

    @property
    def num_variables(self) -> int:
        kind = self.spec.variables
        if kind is VariableKind.MATERIAL:
            return 2
        if kind is VariableKind.INITIAL_STATE:
            return 6
        if kind is VariableKind.ACTUATION:
            return self.groups
        if kind is VariableKind.ACTUATION_KNOTS:
            return self.spec.knots * self.groups
        return 3

    def _check_layout(self) -> None:
        kind = self.spec.variables
        actuated = kind in (VariableKind.ACTUATION, VariableKind.ACTUATION_KNOTS, VariableKind.SINUSOID)
        if actuated and self.groups == 0:
            raise InvalidArgumentError(f"Scene '{self.setup.name}' has no muscles for {kind.value} variables")
        if self.spec.bounds is not None and len(self.spec.bounds) != self.num_variables:
            raise InvalidArgumentError(f"Expected {self.num_variables} bounds, got {len(self.spec.bounds)}")
        for name in ("initial", "reference"):
            values = getattr(self.spec, name)
            if values is not None and len(values) != self.num_variables:
                raise InvalidArgumentError(f"Expected {self.num_variables} {name} values, got {len(values)}")

    def bounds(self) -> List[Tuple[float, float]]:
        if self.spec.bounds is not None:
            return [tuple(b) for b in self.spec.bounds]
        kind = self.spec.variables
        a_max = self.spec.max_activation
        if kind is VariableKind.MATERIAL:
            return [(np.log(1e3), np.log(1e8)), (0.05, 0.49)]
        if kind is VariableKind.INITIAL_STATE:
            dx = self.setup.scene.mesh.dx
            return [(-2 * dx, 2 * dx), (-2 * dx, 2 * dx), (0.0, 2 * dx)] + [(-1.0, 1.0)] * 3
        if kind is VariableKind.SINUSOID:
            return [(0.0, a_max), (0.5, 20.0), (0.0, 2.0 * np.pi)]
        return [(0.0, a_max)] * self.num_variables

    def initial_variables(self) -> np.ndarray:
        if self.spec.initial is not None:
            return np.array(self.spec.initial, dtype=float)
        kind = self.spec.variables
        if kind is VariableKind.MATERIAL:
            return np.array([np.log(self.base_material.youngs_modulus), self.base_material.poissons_ratio])
        if kind is VariableKind.SINUSOID:
            return np.array([0.5 * self.spec.max_activation, 5.0, np.pi / 2.0])
        return np.zeros(self.num_variables)

    def check_bounds(self, variables: np.ndarray) -> None:
        lo, hi = np.array(self.bounds()).T
        slack = 1e-12 * np.maximum(1.0, np.abs(np.array(self.bounds())).max(axis=1))
        if np.any(variables < lo - slack) or np.any(variables > hi + slack):
            raise InvalidArgumentError("Decision variables out of bounds")

    def activations(self, variables: np.ndarray) -> Optional[np.ndarray]:
        """(steps, groups) activations for actuation layouts, None otherwise."""
        kind = self.spec.variables
        if kind is VariableKind.ACTUATION:
            return np.tile(variables, (self.steps, 1))
        if kind is VariableKind.ACTUATION_KNOTS:
            return interpolate_knots(variables.reshape(self.spec.knots, self.groups), self.steps)
        if kind is VariableKind.SINUSOID:
            return sinusoid_actuation(variables, self.steps, self.setup.h, self.groups)
        return None

    def inputs(self, variables: np.ndarray) -> RolloutInputs:
        variables = np.asarray(variables, dtype=float)
        if variables.shape != (self.num_variables,):
            raise InvalidArgumentError(f"Expected {self.num_variables} decision variables")
        setup = self.setup
        x0, v0 = setup.x0, setup.v0
        radii = None if setup.actuation is None else self.simulator.expand_actuation(setup.actuation, self.steps)
        kind = self.spec.variables
        if kind is VariableKind.MATERIAL:
            material = MaterialParams(youngs_modulus=float(np.exp(variables[0])), poissons_ratio=float(variables[1]))
            self.simulator.set_scene(setup.scene.with_material(material))
        elif kind is VariableKind.INITIAL_STATE:
            x0 = x0 + np.tile(variables[:3], setup.scene.mesh.num_nodes)
            v0 = v0 + np.tile(variables[3:], setup.scene.mesh.num_nodes)
        else:
            radii = 1.0 - self.activations(variables)
        return RolloutInputs(self.simulator, x0, v0, radii)

    def rollout(self, variables: np.ndarray) -> Trajectory:
        inputs = self.inputs(variables)
        return inputs.simulator.simulate(inputs.x0, inputs.v0, self.steps, self.setup.f_ext, inputs.actuation)

    def chain(self, bundle: GradientBundle, variables: np.ndarray) -> np.ndarray:
        """Map input gradients onto the decision variables."""
        kind = self.spec.variables
        if kind is VariableKind.MATERIAL:
            return np.array([np.exp(variables[0]) * bundle.youngs_modulus, bundle.poissons_ratio])
        if kind is VariableKind.INITIAL_STATE:
            return np.concatenate([bundle.x0.reshape(-1, 3).sum(axis=0), bundle.v0.reshape(-1, 3).sum(axis=0)])
        grad_a = -bundle.actuation
        if kind is VariableKind.ACTUATION:
            return grad_a.sum(axis=0)
        if kind is VariableKind.ACTUATION_KNOTS:
            return (knot_weights(self.spec.knots, self.steps).T @ grad_a).ravel()
        return _sinusoid_gradient(variables, self.steps, self.setup.h, grad_a)

    def _prepare_reference(self) -> None:
        """Generate the target of self-consistent tasks from ``spec.reference``."""
        if self.spec.reference is None:
            return
        trajectory = self.rollout(np.array(self.spec.reference, dtype=float))
        if self.spec.loss.kind is LossKind.TRAJECTORY_MATCH:
            self.reference_positions = trajectory.positions
        elif self.spec.loss.kind is LossKind.COM_TARGET and self.spec.loss.target is None:
            scene = self.setup.scene
            node = self.spec.loss.node
            final = trajectory.final.x
            self.target = final.reshape(-1, 3)[node] if node is not None else scene.center_of_mass(final)
        logger.info(f"Generated reference rollout for task on '{self.setup.name}'")

    def loss_spec(self) -> LossSpec:
        if self.target is not None:
            return self.spec.loss.model_copy(update={"target": self.target.tolist()})
        return self.spec.loss

    def evaluate(self, variables: np.ndarray, with_grad: bool = True) -> Evaluation:
        variables = np.asarray(variables, dtype=float)
        self.check_bounds(variables)
        trajectory = self.rollout(variables)
        loss, loss_grad = evaluate_loss(self.loss_spec(), self.simulator.scene, trajectory, self.reference_positions)
        if not trajectory.converged:
            logger.warning(f"Loss evaluated on a non-converged trajectory (loss={loss:.6e})")
        if not with_grad:
            return Evaluation(loss, np.zeros(self.num_variables), trajectory.converged, trajectory)
        bundle = differentiate(self.simulator, trajectory, loss_grad)
        return Evaluation(loss, self.chain(bundle, variables), trajectory.converged, trajectory, bundle)


def eval_loss_and_grad(task: Task, variables: np.ndarray) -> Tuple[float, np.ndarray]:
    """Simulate, evaluate the loss and backpropagate it onto the decision variables."""
    evaluation = task.evaluate(variables)
    return evaluation.loss, evaluation.grad


@dataclass
class RandomBaseline:
    losses: np.ndarray
    samples: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.losses))

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.losses))

    @property
    def best(self) -> float:
        return float(self.losses[self.best_index])

    @property
    def best_sample(self) -> np.ndarray:
        return self.samples[self.best_index]


def random_baseline(task: Task, samples: int = RANDOM_SAMPLES, seed: int = 0) -> RandomBaseline:
    """Losses of ``samples`` decision vectors drawn uniformly within the bounds."""
    if samples < 1:
        raise InvalidArgumentError("Random baseline needs at least one sample")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(task.bounds()).T
    points = rng.uniform(lo, hi, size=(samples, lo.shape[0]))
    losses = np.array([task.evaluate(p, with_grad=False).loss for p in points])
    logger.info(f"Random baseline over {samples} samples: mean={losses.mean():.6e}, best={losses.min():.6e}")
    return RandomBaseline(losses, points)


def normalize_losses(losses: np.ndarray, random_mean: float, reference: float) -> np.ndarray:
    """Map losses linearly so that ``random_mean`` -> 1 and ``reference`` -> 0."""
    span = random_mean - reference
    if span == 0.0:
        raise InvalidArgumentError("Random mean equals the reference loss; normalization undefined")
    return (np.asarray(losses, dtype=float) - reference) / span


@dataclass
class TaskResult:
    """Outcome of an optimization task.

    Attributes:
        variables: Best decision variables
        loss: Their loss
        initial_loss: Loss at the initial variables
        optimize: Optimizer result with the full history
        trajectory: Rollout at ``variables``
        normalized: Normalized-loss summary (empty without a random baseline)
        material: Recovered material for system identification
    """

    variables: np.ndarray
    loss: float
    initial_loss: float
    optimize: OptimizeResult
    trajectory: Trajectory
    normalized: Dict[str, float] = field(default_factory=dict)
    material: Optional[MaterialParams] = None


def _optimize(task: Task, x0: np.ndarray) -> OptimizeResult:
    spec = task.spec.optimizer

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            return eval_loss_and_grad(task, x)
        except NumericalFailureError as e:
            logger.warning(f"Evaluation failed ({e}); rejecting the point")
            return np.inf, np.zeros_like(x)

    if spec.kind is OptimizerKind.ADAM:
        return adam(objective, x0, step_size=spec.step_size, iterations=spec.max_iterations, bounds=task.bounds())
    return lbfgs(objective, x0, bounds=task.bounds(), max_iterations=spec.max_iterations, gtol=spec.gtol, ftol=spec.ftol)


def _summary(task: Task, initial_loss: float, loss: float, reference: Optional[float]) -> Dict[str, float]:
    if task.spec.random_samples == 0:
        return {}
    baseline = random_baseline(task, task.spec.random_samples, task.spec.seed)
    reference = loss if reference is None else reference
    summary = {
        "random_mean": baseline.mean,
        "random_best": baseline.best,
        "reference": reference,
        "initial": initial_loss,
        "optimized": loss,
    }
    try:
        normalized = normalize_losses(np.array([initial_loss, loss]), baseline.mean, reference)
        summary["normalized_initial"], summary["normalized_optimized"] = (float(v) for v in normalized)
    except InvalidArgumentError as e:
        logger.warning(f"Skipping loss normalization: {e}")
    return summary


def _finish(task: Task, result: OptimizeResult, reference: Optional[float]) -> TaskResult:
    initial_loss = result.history.entries[0].loss if len(result.history) else np.nan
    trajectory = task.rollout(result.x)
    normalized = _summary(task, initial_loss, result.loss, reference)
    material = task.simulator.scene.material if task.spec.variables is VariableKind.MATERIAL else None
    return TaskResult(result.x, result.loss, initial_loss, result, trajectory, normalized, material)


def run_system_id(task: Task) -> TaskResult:
    """Recover (E, nu) by matching a reference trajectory over (log E, nu).

    Raises:
        InvalidArgumentError: If the task is not a material task with a reference
    """
    if task.spec.variables is not VariableKind.MATERIAL:
        raise InvalidArgumentError("System identification optimizes material variables")
    if task.reference_positions is None:
        raise InvalidArgumentError("System identification needs reference material values and a trajectory_match loss")
    x0 = task.initial_variables()
    result = _optimize(task, x0)
    finished = _finish(task, result, reference=0.0)
    logger.info(
        f"System identification: E={finished.material.youngs_modulus:.6g}, "
        f"nu={finished.material.poissons_ratio:.4f}, loss={finished.loss:.3e}"
    )
    return finished


def run_inverse_design(task: Task) -> TaskResult:
    """Optimize initial conditions or static actuation toward a com_target loss."""
    if task.spec.variables not in (VariableKind.INITIAL_STATE, VariableKind.ACTUATION):
        raise InvalidArgumentError("Inverse design optimizes initial_state or actuation variables")
    x0 = task.initial_variables()
    result = _optimize(task, x0)
    reference = 0.0 if task.target is not None else None
    return _finish(task, result, reference)


def run_trajectory_opt(task: Task) -> TaskResult:
    """Optimize a time-varying actuation; the best random sample seeds the optimizer."""
    if task.spec.variables not in (VariableKind.ACTUATION_KNOTS, VariableKind.SINUSOID, VariableKind.ACTUATION):
        raise InvalidArgumentError("Trajectory optimization needs actuation variables")
    x0 = task.initial_variables()
    if task.spec.random_samples and task.spec.initial is None:
        baseline = random_baseline(task, task.spec.random_samples, task.spec.seed)
        x0 = baseline.best_sample
    result = _optimize(task, x0)
    return _finish(task, result, reference=None)


def run_task(task: Task) -> TaskResult:
    """Dispatch on the decision-variable layout."""
    kind = task.spec.variables
    if kind is VariableKind.MATERIAL:
        return run_system_id(task)
    if kind is VariableKind.INITIAL_STATE or (
        kind is VariableKind.ACTUATION and task.spec.loss.kind is LossKind.COM_TARGET
    ):
        return run_inverse_design(task)
    return run_trajectory_opt(task)
