"""Sticky non-penetrating contact with a planar obstacle.

The predictor-corrector alternates a corrector (an implicit step with the
active nodes pinned at x_i) and a predictor that keeps a candidate active if
it penetrates or if its normal contact force pushes away from the plane. The
loop restarts from x_i every outer iteration and stops once the active set
repeats. A step that ends with a candidate below the plane counts as
unsettled.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.simulation.newton_solver import solve_newton, step_newton
from src.simulation.pd_solver import (
    StepProblem,
    assemble_y,
    free_mask,
    make_inverse,
    make_record,
    solve_pd,
    step_pd,
)
from src.simulation.scene import Scene
from src.simulation.state import SimState, SolverConfig, StepRecord
from src.simulation.timing import PhaseTimer, timed
from src.sparse_core.factor import SpdFactor
from src.sparse_core.lowrank import ContactSet, build_lowrank_system
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class ContactForces:
    """Contact forces of one step.

    Attributes:
        nodes: Candidate nodes
        forces: (k, 3) residual force r_j (zero for inactive candidates)
        normal: (k,) normal component lambda_j = r_j . n
        active: (k,) True where the candidate is pinned
    """

    nodes: np.ndarray
    forces: np.ndarray
    normal: np.ndarray
    active: np.ndarray


def contact_force(record: StepRecord) -> ContactForces:
    """Per-candidate contact forces of a step record.

    The force on an active node is its residual
    (M/h^2)(x_{i+1} - y) - f_int(x_{i+1}); inactive candidates carry none.
    """
    nodes = record.contact_candidates
    active = np.isin(nodes, record.active.nodes)
    forces = record.residual.reshape(-1, 3)[nodes] * active[:, None]
    normal = forces @ record.contact_normal if record.contact_normal is not None else np.zeros(nodes.shape[0])
    return ContactForces(nodes=nodes, forces=forces, normal=normal, active=active)


def predict_active_set(
    scene: Scene,
    x_new: np.ndarray,
    residual: np.ndarray,
    active: ContactSet,
) -> ContactSet:
    """Candidates that penetrate at x_new or push against the plane."""
    nodes = scene.contact_nodes
    phi = scene.plane.phi(x_new.reshape(-1, 3)[nodes])
    lam = residual.reshape(-1, 3)[nodes] @ scene.plane.normal
    lam = np.where(np.isin(nodes, active.nodes), lam, 0.0)
    keep = (phi < -scene.contact_geometry_eps) | (lam > scene.contact_force_eps)
    return ContactSet.from_nodes(nodes[keep])


def step_with_contact(
    scene: Scene,
    factor: Optional[SpdFactor],
    state: SimState,
    f_ext: np.ndarray,
    h: float,
    config: SolverConfig,
    actuation: Optional[np.ndarray] = None,
    timer: Optional[PhaseTimer] = None,
) -> StepRecord:
    """Implicit step with the contact predictor-corrector.

    PD correctors solve through the low-rank pinned system built on
    ``factor``; Newton correctors eliminate the pinned DoFs directly.

    Args:
        scene: Scene with contact candidates and a plane
        factor: Prefactorized A with the candidates cached (unused by Newton)
        state: Current state
        f_ext: Total external force (gravity included)
        h: Time step in seconds
        config: Solver configuration
        actuation: Muscle radii per group
        timer: Optional phase timer

    Returns:
        StepRecord: Step with the final active set; ``converged`` is False if
            the active set did not settle within ``config.contact_max_outer``
            or a pinned node ended below the plane
    """
    if not scene.has_contact:
        if config.method.is_newton:
            return step_newton(scene, state, f_ext, h, config, actuation, timer=timer)
        return step_pd(scene, factor, state, f_ext, h, config, actuation, timer)

    f_ext = np.asarray(f_ext, dtype=float)
    y = assemble_y(state, f_ext, scene.mass, h)
    active = ContactSet.empty()
    iterations = 0
    settled = False
    outcome = None

    for outer in range(1, config.contact_max_outer + 1):
        problem = StepProblem(scene, y, h, f_ext, actuation, free_mask(scene, active), timer)
        if config.method.is_newton:
            outcome = solve_newton(problem, state.x, config, state.step)
        else:
            with timed(timer, "contact"):
                lowrank = build_lowrank_system(factor, active, use_cache=config.use_cached_columns)
            outcome = solve_pd(problem, state.x, make_inverse(factor, lowrank, timer), config)
        iterations += outcome.iterations
        solved = active

        with timed(timer, "contact"):
            predicted = predict_active_set(scene, outcome.x, outcome.residual, active)
        logger.debug(f"Contact outer {outer}: {active.size} -> {predicted.size} active nodes")
        if predicted.same_as(active):
            settled = True
            break
        active = predicted

    # Nodes pinned while already below the plane stay below it
    phi = scene.plane.phi(outcome.x.reshape(-1, 3)[scene.contact_nodes])
    sunk = int(np.count_nonzero(phi < -scene.contact_geometry_eps))
    if not settled:
        logger.warning(
            f"Contact active set did not settle in {config.contact_max_outer} outer iterations "
            f"(step {state.step})"
        )
    elif sunk:
        logger.warning(f"{sunk} contact nodes pinned below the plane (step {state.step})")
        settled = False
    elif not outcome.converged:
        logger.warning(f"Contact corrector not converged (step {state.step}, rel={outcome.relative_residual:.3e})")

    outcome.iterations = iterations
    outcome.converged = outcome.converged and settled
    return make_record(
        scene, state, outcome, y, f_ext, actuation, h, config.method, solved, outer_iterations=outer
    )
