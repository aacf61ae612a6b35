"""Adjoint linear solves A_N u = b for one recorded time step.

A_N = A - dA is the Jacobian of the step residual at x_{i+1}, where A is the
constant PD matrix and dA = sum_e w_e G_e^T J_e G_e collects the projection
Jacobians. Three solvers are available:

* bfgs: minimize 1/2 u^T A_N u - b^T u with L-BFGS, using A^-1 as the
  initial inverse Hessian and an exact line search on the quadratic
* fixed_point: u <- A^-1 (b + dA u)
* newton: assemble A_N and solve it directly or with PCG

Fixed DoFs (Dirichlet and active contact) are eliminated; u is zero there.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from src.simulation.newton_solver import linear_solver_for
from src.simulation.pd_solver import LbfgsHistory, free_mask
from src.simulation.scene import Scene
from src.simulation.state import AdjointMethod, SolverConfig, StepRecord
from src.simulation.timing import PhaseTimer, timed
from src.sparse_core.assembly import eliminate
from src.sparse_core.factor import SpdFactor
from src.sparse_core.linear_solvers import NewtonLinearSolver, solve_newton_system
from src.sparse_core.lowrank import LowRankSystem, build_lowrank_system
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)

SPECTRAL_PROBE_ITERATIONS = 50


@dataclass
class AdjointResult:
    """Outcome of one adjoint solve.

    Attributes:
        u: Adjoint vector (zero on fixed DoFs)
        iterations: Iterations used (1 for direct solves)
        converged: Relative residual reached the tolerance
        degraded: The PD solver hit non-positive curvature and fell back to Newton
        residual: Final ||A_N u - b|| / ||b||
        method: Solver that produced ``u``
    """

    u: np.ndarray
    iterations: int
    converged: bool
    degraded: bool
    residual: float
    method: AdjointMethod


class AdjointSystem:
    """A_N at one recorded step, restricted to the step's unconstrained DoFs."""

    def __init__(
        self,
        scene: Scene,
        factor: Optional[SpdFactor],
        record: StepRecord,
        config: SolverConfig,
        timer: Optional[PhaseTimer] = None,
    ):
        self.scene = scene
        self.factor = factor
        self.record = record
        self.timer = timer
        self.mask = free_mask(scene, record.active)
        self.mass_over_h2 = scene.mass.diagonal / record.h**2
        self.jacobians: List[np.ndarray] = scene.energies.jacobians(
            record.local, cache=config.cache_jacobians
        )
        self.lowrank: Optional[LowRankSystem] = None
        if factor is not None and record.active.size:
            with timed(timer, "contact"):
                self.lowrank = build_lowrank_system(factor, record.active, use_cache=config.use_cached_columns)
        self._base: Optional[sp.csr_matrix] = None

    @property
    def num_dofs(self) -> int:
        return int(self.mask.shape[0])

    @property
    def base(self) -> sp.spmatrix:
        """M/h^2 + sum w G^T G (the factorized matrix when one is available)."""
        if self.factor is not None:
            return self.factor.matrix
        if self._base is None:
            self._base = (sp.diags(self.mass_over_h2) + self.scene.energies.stiffness_matrix()).tocsr()
        return self._base

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return np.where(self.mask, v, 0.0)

    def delta(self, u: np.ndarray) -> np.ndarray:
        """dA u on unconstrained DoFs."""
        du = self.scene.energies.delta_a_apply(self.record.local, self.restrict(u), self.jacobians)
        return self.restrict(du)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """A_N u with fixed rows and columns replaced by the identity."""
        u_free = self.restrict(u)
        out = self.base @ u_free - self.scene.energies.delta_a_apply(self.record.local, u_free, self.jacobians)
        return np.where(self.mask, out, u)

    def apply_full(self, u: np.ndarray) -> np.ndarray:
        """Rows of the uneliminated A_N times u (u must vanish on fixed DoFs)."""
        return self.base @ u - self.scene.energies.delta_a_apply(self.record.local, u, self.jacobians)

    def inverse(self, d: np.ndarray) -> np.ndarray:
        """A^-1 d on unconstrained DoFs (contact DoFs pinned at zero)."""
        if self.factor is None:
            raise InvalidArgumentError("The PD adjoint needs the prefactorized global matrix")
        with timed(self.timer, "global"):
            d = self.restrict(d)
            if self.lowrank is not None and self.lowrank.rank:
                return self.lowrank.solve(d)
            return self.restrict(self.factor.solve(d))

    def newton_matrix(self) -> sp.csr_matrix:
        hessian = self.scene.energies.hessian(self.record.local, self.jacobians)
        return eliminate(sp.diags(self.mass_over_h2) + hessian, ~self.mask)

    def relative_residual(self, u: np.ndarray, b: np.ndarray) -> float:
        norm_b = float(np.linalg.norm(b))
        if norm_b == 0.0:
            return float(np.linalg.norm(u))
        return float(np.linalg.norm(self.apply(u) - b)) / norm_b


def _solve_bfgs(system: AdjointSystem, b: np.ndarray, tol: float, config: SolverConfig) -> Optional[AdjointResult]:
    """L-BFGS on the adjoint quadratic; None on non-positive curvature."""
    norm_b = float(np.linalg.norm(b))
    u = np.zeros_like(b)
    r = -b
    history = LbfgsHistory(config.bfgs_history, system.inverse)

    iterations = 0
    rel = 1.0
    while iterations < config.adjoint_max_iterations:
        p = -history.apply(r)
        if float(np.dot(p, r)) >= 0.0:
            history.pairs.clear()
            p = -system.inverse(r)
        Ap = system.apply(p)
        curvature = float(np.dot(p, Ap))
        if not curvature > 0.0:
            logger.warning(f"Adjoint curvature {curvature:.3e} is not positive after {iterations} iterations")
            return None
        alpha = -float(np.dot(r, p)) / curvature
        u = u + alpha * p
        r = r + alpha * Ap
        history.push(alpha * p, alpha * Ap)
        iterations += 1
        rel = float(np.linalg.norm(r)) / norm_b
        logger.debug(f"Adjoint BFGS iteration {iterations}: rel={rel:.3e}")
        if rel <= tol:
            break

    rel = system.relative_residual(u, b)
    return AdjointResult(u, iterations, rel <= tol, False, rel, AdjointMethod.BFGS)


def _solve_fixed_point(system: AdjointSystem, b: np.ndarray, tol: float, config: SolverConfig) -> AdjointResult:
    u = system.inverse(b)
    iterations = 1
    rel = system.relative_residual(u, b)
    while rel > tol and iterations < config.adjoint_max_iterations:
        u = system.inverse(b + system.delta(u))
        iterations += 1
        rel = system.relative_residual(u, b)
        logger.debug(f"Adjoint fixed-point iteration {iterations}: rel={rel:.3e}")
        if not np.isfinite(rel) or rel > 1e8:
            logger.warning(f"Adjoint fixed-point iteration diverging (rel={rel:.3e})")
            break
    return AdjointResult(u, iterations, rel <= tol, False, rel, AdjointMethod.FIXED_POINT)


def adjoint_solve_newton(
    system: AdjointSystem,
    b: np.ndarray,
    config: SolverConfig,
) -> AdjointResult:
    """Assemble A_N and solve it (direct, or PCG when the forward method is newton_pcg)."""
    solver = linear_solver_for(config.method) if config.method.is_newton else NewtonLinearSolver.CHOLESKY
    tol = config.effective_adjoint_tolerance
    b = system.restrict(b)
    with timed(system.timer, "global"):
        u = system.restrict(solve_newton_system(system.newton_matrix(), b, solver, tol=tol))
    rel = system.relative_residual(u, b)
    converged = solver is NewtonLinearSolver.CHOLESKY or rel <= tol
    return AdjointResult(u, 1, converged, False, rel, AdjointMethod.NEWTON)


def solve_adjoint(
    system: AdjointSystem,
    b: np.ndarray,
    config: SolverConfig,
    method: Optional[AdjointMethod] = None,
) -> AdjointResult:
    """Solve A_N u = b with the configured adjoint method.

    Without a prefactorized matrix (Newton forward runs) the Newton adjoint
    is used regardless of ``method``.

    Raises:
        NumericalFailureError: If the adjoint vector is not finite
    """
    method = AdjointMethod(method) if method is not None else config.adjoint_method
    b = np.asarray(b, dtype=float)
    if b.shape != (system.num_dofs,):
        raise InvalidArgumentError(f"Adjoint right-hand side must have {system.num_dofs} entries")
    b = system.restrict(b)
    step = system.record.pre.step
    if not np.all(np.isfinite(b)):
        raise NumericalFailureError("Adjoint right-hand side is not finite", step=step)
    if not np.any(b):
        return AdjointResult(np.zeros_like(b), 0, True, False, 0.0, method)

    tol = config.effective_adjoint_tolerance
    if system.factor is None or method is AdjointMethod.NEWTON:
        result = adjoint_solve_newton(system, b, config)
    elif method is AdjointMethod.FIXED_POINT:
        result = _solve_fixed_point(system, b, tol, config)
    else:
        result = _solve_bfgs(system, b, tol, config)
        if result is None:
            result = adjoint_solve_newton(system, b, config)
            result.degraded = True

    if not np.all(np.isfinite(result.u)):
        logger.error(f"Adjoint solve produced non-finite values at step {step}")
        raise NumericalFailureError("Adjoint solve produced non-finite values", step=step)
    if not result.converged:
        logger.warning(
            f"Adjoint solve at step {step} not converged after {result.iterations} iterations "
            f"(rel={result.residual:.3e}, method={result.method.value})"
        )
    return result


def adjoint_solve_pd(
    scene: Scene,
    factor: SpdFactor,
    record: StepRecord,
    b: np.ndarray,
    config: SolverConfig,
    method: Optional[AdjointMethod] = None,
    timer: Optional[PhaseTimer] = None,
) -> AdjointResult:
    """u = A_N^-1 b for one record with the PD quasi-Newton (or fixed-point) solver.

    Args:
        scene: Scene the record was simulated with
        factor: Prefactorized A of that scene
        record: Forward step record
        b: Right-hand side (3n)
        config: Solver configuration (tolerance, history, iteration cap)
        method: bfgs or fixed_point (defaults to ``config.adjoint_method``)
        timer: Optional phase timer

    Returns:
        AdjointResult: ``degraded`` is set when the Newton fallback ran
    """
    if factor is None:
        raise InvalidArgumentError("adjoint_solve_pd needs a prefactorized global matrix")
    return solve_adjoint(AdjointSystem(scene, factor, record, config, timer), b, config, method)


def spectral_gap_probe(
    scene: Scene,
    factor: SpdFactor,
    record: StepRecord,
    iterations: int = SPECTRAL_PROBE_ITERATIONS,
    seed: int = 0,
) -> float:
    """Power-iteration estimate of the spectral radius of A^-1 dA.

    The fixed-point adjoint converges when the estimate is below one. The
    eigenvalues are real (A is SPD, dA symmetric), so the final estimate is
    the magnitude of the A-weighted Rayleigh quotient.
    """
    config = SolverConfig(threads=scene.energies.threads)
    system = AdjointSystem(scene, factor, record, config)
    rng = np.random.default_rng(seed)
    v = system.restrict(rng.standard_normal(system.num_dofs))
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return 0.0
    v /= norm
    for _ in range(iterations):
        w = system.inverse(system.delta(v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
    Av = system.apply(v)
    return abs(float(np.dot(v, system.delta(v)))) / float(np.dot(v, Av + system.delta(v)))
