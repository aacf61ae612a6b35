"""Projective Dynamics time stepping.

One implicit step minimizes
    Phi(x) = 1/(2h^2) (x - y)^T M (x - y) + E(x)
whose gradient is the residual (M/h^2)(x - y) - f_int(x). A PD iteration is
the local step (all projections) followed by the global solve with the
constant matrix A, written here as the descent direction p = -A^-1 g so that
a backtracking line search can guard every update.
"""

from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Optional, Tuple

import numpy as np

from src.energy.terms import LocalState
from src.mesh.mass import LumpedMass
from src.simulation.scene import Scene
from src.simulation.state import SimState, SolverConfig, SolverMethod, StepRecord
from src.simulation.timing import PhaseTimer, timed
from src.sparse_core.factor import SpdFactor
from src.sparse_core.lowrank import ContactSet, LowRankSystem
from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

# Relative slack on objective decrease, absorbs round-off near convergence
OBJECTIVE_SLACK = 1e-12


def assemble_y(state: SimState, f_ext: np.ndarray, mass: LumpedMass, h: float) -> np.ndarray:
    """y = x_i + h v_i + h^2 M^-1 f_ext.

    Example:
        >>> y = assemble_y(state, np.zeros_like(state.x), mass, 0.01)
    """
    if not h > 0:
        raise InvalidArgumentError(f"Time step must be positive, got {h}")
    f_ext = np.asarray(f_ext, dtype=float)
    if f_ext.shape != state.x.shape:
        raise InvalidArgumentError("External force does not match the state size")
    return state.x + h * state.v + h**2 * f_ext / mass.diagonal


@dataclass
class StepProblem:
    """The minimization solved by one implicit step."""

    scene: Scene
    y: np.ndarray
    h: float
    f_ext: np.ndarray
    actuation: Optional[np.ndarray]
    mask: np.ndarray
    timer: Optional[PhaseTimer] = None

    def __post_init__(self) -> None:
        self.mass_over_h2 = self.scene.mass.diagonal / self.h**2
        self.scale = max(
            float(np.linalg.norm((self.mass_over_h2 * self.y)[self.mask])),
            float(np.linalg.norm(self.f_ext[self.mask])),
            np.finfo(float).tiny,
        )

    def local(self, x: np.ndarray) -> LocalState:
        with timed(self.timer, "local"):
            return self.scene.energies.evaluate(x, self.actuation)

    def objective(self, local: LocalState) -> float:
        dx = local.x - self.y
        inertia = 0.5 * float(np.dot(dx, self.mass_over_h2 * dx))
        return inertia + self.scene.energies.energy(local.x, local=local)

    def residual(self, local: LocalState) -> np.ndarray:
        """Full residual (M/h^2)(x - y) - f_int(x)."""
        f_int = self.scene.energies.elastic_force(local.x, local=local)
        return self.mass_over_h2 * (local.x - self.y) - f_int

    def gradient(self, residual: np.ndarray) -> np.ndarray:
        return np.where(self.mask, residual, 0.0)

    def relative(self, g: np.ndarray) -> float:
        return float(np.linalg.norm(g)) / self.scale


@dataclass
class LineSearchResult:
    x: np.ndarray
    local: LocalState
    objective: float
    alpha: float


def backtracking_line_search(
    problem: StepProblem,
    x: np.ndarray,
    phi0: float,
    g: np.ndarray,
    p: np.ndarray,
    config: SolverConfig,
) -> Optional[LineSearchResult]:
    """Armijo backtracking from alpha = 1; None when no step is accepted."""
    slope = float(np.dot(g, p))
    alpha = 1.0
    for _ in range(config.max_backtracks + 1):
        x_new = x + alpha * p
        local = problem.local(x_new)
        phi = problem.objective(local)
        if phi <= phi0 + config.armijo * alpha * slope + OBJECTIVE_SLACK * abs(phi0):
            return LineSearchResult(x=x_new, local=local, objective=phi, alpha=alpha)
        alpha *= config.shrink
    return None


class LbfgsHistory:
    """Limited-memory BFGS curvature pairs with a custom initial inverse Hessian."""

    def __init__(self, size: int, initial_inverse: Callable[[np.ndarray], np.ndarray]):
        self.pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=size)
        self.initial_inverse = initial_inverse

    def __len__(self) -> int:
        return len(self.pairs)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store (s, y) if it satisfies the curvature condition s.y > 0."""
        sy = float(np.dot(s, y))
        if sy <= 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)) or sy <= 0.0:
            return False
        self.pairs.append((s, y, 1.0 / sy))
        return True

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Two-loop recursion: approximate inverse Hessian times g."""
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(np.dot(s, q))
            alphas.append(a)
            q -= a * y
        r = self.initial_inverse(q)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(np.dot(y, r))
            r += (a - b) * s
        return r


def make_inverse(
    factor: SpdFactor,
    lowrank: Optional[LowRankSystem],
    timer: Optional[PhaseTimer] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """A^-1 (or the contact-pinned inverse) as a callable."""

    def apply(g: np.ndarray) -> np.ndarray:
        with timed(timer, "global"):
            if lowrank is None or lowrank.rank == 0:
                return factor.solve(g)
            return lowrank.solve(g)

    return apply


@dataclass
class SolveOutcome:
    x: np.ndarray
    local: LocalState
    residual: np.ndarray
    relative_residual: float
    iterations: int
    converged: bool


def solve_pd(
    problem: StepProblem,
    x_start: np.ndarray,
    inverse: Callable[[np.ndarray], np.ndarray],
    config: SolverConfig,
) -> SolveOutcome:
    """Global-local iterations with line search, optionally L-BFGS accelerated."""
    x = x_start.copy()
    local = problem.local(x)
    phi = problem.objective(local)
    residual = problem.residual(local)
    g = problem.gradient(residual)
    rel = problem.relative(g)
    history = LbfgsHistory(config.bfgs_history, inverse) if config.use_bfgs else None

    iterations = 0
    converged = rel <= config.tolerance
    while not converged and iterations < config.max_iterations:
        p = None
        if history is not None and len(history):
            p = -history.apply(g)
            if float(np.dot(p, g)) >= 0.0:
                p = None
        if p is None:
            p = -inverse(g)
        step = backtracking_line_search(problem, x, phi, g, p, config)
        if step is None and history is not None and len(history):
            history.pairs.clear()
            p = -inverse(g)
            step = backtracking_line_search(problem, x, phi, g, p, config)
        if step is None:
            logger.warning(f"PD line search stalled at relative residual {rel:.3e}")
            break

        new_residual = problem.residual(step.local)
        new_g = problem.gradient(new_residual)
        if history is not None:
            history.push(step.x - x, new_g - g)
        x, local, phi, residual, g = step.x, step.local, step.objective, new_residual, new_g
        rel = problem.relative(g)
        iterations += 1
        logger.debug(f"PD iteration {iterations}: rel={rel:.3e}, alpha={step.alpha:.3g}")
        converged = rel <= config.tolerance

    return SolveOutcome(x, local, residual, rel, iterations, converged)


def free_mask(scene: Scene, active: Optional[ContactSet] = None) -> np.ndarray:
    """DoFs the solver may move: not Dirichlet and not pinned by contact."""
    mask = scene.mesh.free_mask()
    if active is not None and active.size:
        mask[active.dofs] = False
    return mask


def step_pd(
    scene: Scene,
    factor: SpdFactor,
    state: SimState,
    f_ext: np.ndarray,
    h: float,
    config: SolverConfig,
    actuation: Optional[np.ndarray] = None,
    timer: Optional[PhaseTimer] = None,
) -> StepRecord:
    """One contact-free PD step.

    Args:
        scene: Scene the factor was built for
        factor: Prefactorized A for (scene, h)
        state: Current state
        f_ext: Total external force (gravity included)
        h: Time step in seconds
        config: Solver configuration
        actuation: Muscle radii per group
        timer: Optional phase timer

    Returns:
        StepRecord: Converged (or best, flagged) step
    """
    y = assemble_y(state, f_ext, scene.mass, h)
    problem = StepProblem(scene, y, h, np.asarray(f_ext, dtype=float), actuation, free_mask(scene), timer)
    outcome = solve_pd(problem, state.x, make_inverse(factor, None, timer), config)
    if not outcome.converged:
        logger.warning(
            f"PD step {state.step} not converged after {outcome.iterations} iterations "
            f"(rel={outcome.relative_residual:.3e})"
        )
    return make_record(scene, state, outcome, y, f_ext, actuation, h, SolverMethod.PD)


def make_record(
    scene: Scene,
    state: SimState,
    outcome: SolveOutcome,
    y: np.ndarray,
    f_ext: np.ndarray,
    actuation: Optional[np.ndarray],
    h: float,
    method: SolverMethod,
    active: Optional[ContactSet] = None,
    outer_iterations: int = 0,
) -> StepRecord:
    post = SimState(x=outcome.x, v=(outcome.x - state.x) / h, step=state.step + 1)
    return StepRecord(
        pre=state,
        post=post,
        y=y,
        f_ext=np.asarray(f_ext, dtype=float),
        actuation=None if actuation is None else np.asarray(actuation, dtype=float),
        active=active if active is not None else ContactSet.empty(),
        local=outcome.local,
        residual=outcome.residual,
        relative_residual=outcome.relative_residual,
        iterations=outcome.iterations,
        converged=outcome.converged,
        method=method,
        h=float(h),
        outer_iterations=outer_iterations,
        contact_candidates=scene.contact_nodes,
        contact_normal=None if scene.plane is None else scene.plane.normal,
    )
