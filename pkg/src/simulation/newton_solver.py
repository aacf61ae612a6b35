"""Newton baselines (Newton-Cholesky and Newton-PCG) for the implicit step.

The Hessian of the step objective is M/h^2 + sum_e w_e G_e^T (I - J_e) G_e,
rebuilt from the projection Jacobians every iteration.
"""

from typing import Optional

import numpy as np
import scipy.sparse as sp

from src.simulation.pd_solver import (
    SolveOutcome,
    StepProblem,
    assemble_y,
    backtracking_line_search,
    free_mask,
    make_record,
)
from src.simulation.scene import Scene
from src.simulation.state import SimState, SolverConfig, SolverMethod, StepRecord
from src.simulation.timing import PhaseTimer, timed
from src.sparse_core.assembly import eliminate
from src.sparse_core.factor import factorize_spd
from src.sparse_core.linear_solvers import NewtonLinearSolver, solve_newton_system
from src.sparse_core.lowrank import ContactSet
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)


def linear_solver_for(method: SolverMethod) -> NewtonLinearSolver:
    if method is SolverMethod.NEWTON_PCG:
        return NewtonLinearSolver.PCG
    if method is SolverMethod.NEWTON_CHOLESKY:
        return NewtonLinearSolver.CHOLESKY
    raise InvalidArgumentError(f"{method.value} is not a Newton method")


def newton_matrix(problem: StepProblem, local) -> sp.csr_matrix:
    """M/h^2 + energy Hessian, eliminated on the problem's fixed DoFs."""
    hessian = problem.scene.energies.hessian(local)
    return eliminate(sp.diags(problem.mass_over_h2) + hessian, ~problem.mask)


def solve_newton(
    problem: StepProblem,
    x_start: np.ndarray,
    config: SolverConfig,
    step_index: int = 0,
) -> SolveOutcome:
    """Damped Newton iterations on the step objective.

    Raises:
        NumericalFailureError: If the line search finds no decrease
    """
    solver = linear_solver_for(config.method)
    x = x_start.copy()
    local = problem.local(x)
    phi = problem.objective(local)
    residual = problem.residual(local)
    g = problem.gradient(residual)
    rel = problem.relative(g)
    fallback = None

    iterations = 0
    converged = rel <= config.tolerance
    while not converged and iterations < config.max_iterations:
        with timed(problem.timer, "global"):
            p = None
            try:
                p = -solve_newton_system(newton_matrix(problem, local), g, solver, tol=config.tolerance)
            except NumericalFailureError as e:
                logger.warning(f"Newton matrix rejected ({e}); using the PD matrix direction")
            if p is None or not np.all(np.isfinite(p)) or float(np.dot(p, g)) >= 0.0:
                if fallback is None:
                    stiffness = problem.scene.energies.stiffness_matrix()
                    fallback = factorize_spd(
                        eliminate(sp.diags(problem.mass_over_h2) + stiffness, ~problem.mask),
                        label="fallback matrix",
                    )
                p = -fallback.solve(g)

        step = backtracking_line_search(problem, x, phi, g, p, config)
        if step is None:
            logger.error(f"Newton line search failed at relative residual {rel:.3e}")
            raise NumericalFailureError(
                f"Newton line search found no decrease after {config.max_backtracks} backtracks",
                step=step_index,
            )
        x, local, phi = step.x, step.local, step.objective
        residual = problem.residual(local)
        g = problem.gradient(residual)
        rel = problem.relative(g)
        iterations += 1
        logger.debug(f"Newton iteration {iterations}: rel={rel:.3e}, alpha={step.alpha:.3g}")
        converged = rel <= config.tolerance

    return SolveOutcome(x, local, residual, rel, iterations, converged)


def step_newton(
    scene: Scene,
    state: SimState,
    f_ext: np.ndarray,
    h: float,
    config: SolverConfig,
    actuation: Optional[np.ndarray] = None,
    active: Optional[ContactSet] = None,
    timer: Optional[PhaseTimer] = None,
) -> StepRecord:
    """One Newton step (contact nodes in ``active`` are pinned at x_i).

    Args:
        scene: Scene to step
        state: Current state
        f_ext: Total external force (gravity included)
        h: Time step in seconds
        config: Solver configuration with a Newton method
        actuation: Muscle radii per group
        active: Nodes pinned at their current position
        timer: Optional phase timer

    Returns:
        StepRecord: Converged (or best, flagged) step
    """
    if not config.method.is_newton:
        raise InvalidArgumentError("step_newton needs a Newton solver method")
    y = assemble_y(state, f_ext, scene.mass, h)
    problem = StepProblem(
        scene, y, h, np.asarray(f_ext, dtype=float), actuation, free_mask(scene, active), timer
    )
    outcome = solve_newton(problem, state.x, config, state.step)
    if not outcome.converged:
        logger.warning(
            f"Newton step {state.step} not converged after {outcome.iterations} iterations "
            f"(rel={outcome.relative_residual:.3e})"
        )
    return make_record(scene, state, outcome, y, f_ext, actuation, h, config.method, active)
