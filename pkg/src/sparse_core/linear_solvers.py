"""Linear solvers for the Newton baselines.

Newton systems change every iteration, so they are either factorized afresh
(direct) or solved by conjugate gradients with a Jacobi preconditioner.
"""

from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.sparse_core.factor import factorization_stats, factorize_spd
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)


class NewtonLinearSolver(str, Enum):
    """Linear solver used inside Newton iterations."""

    CHOLESKY = "cholesky"
    PCG = "pcg"


def solve_newton_system(
    matrix: sp.spmatrix,
    rhs: np.ndarray,
    solver: NewtonLinearSolver | str = NewtonLinearSolver.CHOLESKY,
    tol: float = 1e-10,
    max_iterations: int | None = None,
) -> np.ndarray:
    """Solve an SPD Newton system.

    Args:
        matrix: SPD sparse matrix (already eliminated)
        rhs: Right-hand side
        solver: cholesky (factorize) or pcg (Jacobi-preconditioned CG)
        tol: Relative residual stop for PCG
        max_iterations: PCG iteration cap (default 10 n)

    Returns:
        np.ndarray: Solution vector

    Raises:
        NumericalFailureError: If the matrix is indefinite or PCG breaks down
    """
    solver = NewtonLinearSolver(solver)
    rhs = np.asarray(rhs, dtype=float)
    if solver is NewtonLinearSolver.CHOLESKY:
        return factorize_spd(matrix, label="Newton matrix").solve(rhs)

    csr = sp.csr_matrix(matrix)
    diag = csr.diagonal()
    if np.any(diag <= 0.0):
        raise NumericalFailureError("Newton matrix has a non-positive diagonal entry")
    preconditioner = sp.diags(1.0 / diag)
    factorization_stats.record_pcg()
    maxiter = max_iterations if max_iterations is not None else 10 * csr.shape[0]
    x, info = spla.cg(csr, rhs, rtol=tol, atol=0.0, maxiter=maxiter, M=preconditioner)
    if info < 0:
        raise NumericalFailureError(f"PCG breakdown (info={info})")
    if info > 0:
        logger.warning(f"PCG did not reach rtol={tol:.1e} in {info} iterations")
    return x


def check_solver_name(name: str) -> NewtonLinearSolver:
    try:
        return NewtonLinearSolver(name)
    except ValueError as e:
        raise InvalidArgumentError(f"Unknown Newton linear solver: {name}") from e
