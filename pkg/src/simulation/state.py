"""Simulation state, solver configuration and step records."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config.settings import settings
from src.energy.terms import LocalState
from src.sparse_core.lowrank import ContactSet


class SolverMethod(str, Enum):
    """Forward time-stepping method."""

    PD = "pd"
    NEWTON_PCG = "newton_pcg"
    NEWTON_CHOLESKY = "newton_cholesky"

    @property
    def is_newton(self) -> bool:
        return self is not SolverMethod.PD


class AdjointMethod(str, Enum):
    """Linear solver for the per-step adjoint system A_N u = b."""

    BFGS = "bfgs"
    FIXED_POINT = "fixed_point"
    NEWTON = "newton"


class SolverConfig(BaseModel):
    """Forward and adjoint solver settings.

    Attributes:
        method: pd, newton_pcg or newton_cholesky
        tolerance: Relative residual threshold in (0, 1)
        max_iterations: Iteration cap per time step
        armijo: Sufficient-decrease constant of the backtracking line search
        shrink: Step shrink factor per backtrack
        max_backtracks: Backtracks before the line search gives up
        contact_max_outer: Predictor-corrector outer iteration cap
        use_bfgs: Accelerate forward PD iterations with L-BFGS (A as initial Hessian)
        bfgs_history: Curvature pairs kept by every L-BFGS solver
        adjoint_method: bfgs, fixed_point or newton
        adjoint_tolerance: Adjoint relative residual threshold (defaults to ``tolerance``)
        adjoint_max_iterations: Iteration cap of iterative adjoint solvers
        use_cached_columns: Use the cached A^-1 columns in contact solves
        cache_jacobians: Keep projection Jacobians on records after the first backprop use
        threads: Worker threads for element-parallel kernels
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: SolverMethod = SolverMethod.PD
    tolerance: float = Field(default_factory=lambda: settings.solver_tolerance, gt=0.0, lt=1.0)
    max_iterations: int = Field(default_factory=lambda: settings.solver_max_iterations, ge=1)
    armijo: float = Field(default=1e-4, gt=0.0, lt=1.0)
    shrink: float = Field(default=0.5, gt=0.0, lt=1.0)
    max_backtracks: int = Field(default=20, ge=0)
    contact_max_outer: int = Field(
        default_factory=lambda: settings.contact_max_outer_iterations, ge=1
    )
    use_bfgs: bool = False
    bfgs_history: int = Field(default_factory=lambda: settings.bfgs_history, ge=1)
    adjoint_method: AdjointMethod = AdjointMethod.BFGS
    adjoint_tolerance: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    adjoint_max_iterations: int = Field(default=1000, ge=1)
    use_cached_columns: bool = True
    cache_jacobians: bool = False
    threads: int = Field(default_factory=lambda: settings.worker_threads, ge=1)

    @property
    def effective_adjoint_tolerance(self) -> float:
        return self.adjoint_tolerance if self.adjoint_tolerance is not None else self.tolerance


@dataclass(frozen=True)
class SimState:
    """Positions and velocities (stacked 3n vectors) at a time step."""

    x: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class StepRecord:
    """Everything the backward pass needs from one forward step.

    Attributes:
        pre: State x_i, v_i
        post: State x_{i+1}, v_{i+1}
        y: Inertial target x_i + h v_i + h^2 M^-1 f
        f_ext: Total external force used (user force plus gravity)
        actuation: Muscle radii used, or None
        active: Active contact set at convergence
        local: Projections at x_{i+1}
        residual: (M/h^2)(x_{i+1} - y) - f_int(x_{i+1}) on all DoFs
        relative_residual: Residual norm on unconstrained DoFs over the reference scale
        iterations: Solver iterations (summed over contact outer iterations)
        outer_iterations: Predictor-corrector iterations (0 without contact)
        converged: False when an iteration cap was hit
        method: Forward method that produced the record
        h: Time step in seconds
    """

    pre: SimState
    post: SimState
    y: np.ndarray
    f_ext: np.ndarray
    actuation: Optional[np.ndarray]
    active: ContactSet
    local: LocalState
    residual: np.ndarray
    relative_residual: float
    iterations: int
    converged: bool
    method: SolverMethod
    h: float
    outer_iterations: int = 0
    contact_candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    contact_normal: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """A forward rollout.

    Attributes:
        initial: State x_0, v_0 (Dirichlet values imposed)
        records: One record per step
        h: Time step in seconds
        config: Solver configuration used
        f_ext: (steps, 3n) user external forces (gravity excluded)
        actuation: (steps, groups) muscle radii, or None
        timings: Wall-clock seconds per phase
    """

    initial: SimState
    records: List[StepRecord]
    h: float
    config: SolverConfig
    f_ext: np.ndarray
    actuation: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def states(self) -> List[SimState]:
        return [self.initial] + [r.post for r in self.records]

    @property
    def positions(self) -> np.ndarray:
        """(steps + 1, 3n) positions including the initial frame."""
        return np.stack([s.x for s in self.states])

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([s.v for s in self.states])

    @property
    def final(self) -> SimState:
        return self.states[-1]

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.records)
