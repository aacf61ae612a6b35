"""Prefactorized SPD systems.

Factorizations use SuperLU in symmetric mode with diagonal pivoting, which
for an SPD matrix is a permuted LDL^T; the matrix is accepted only when every
pivot is strictly positive.
"""

from dataclasses import dataclass, field
from threading import Lock
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class FactorizationStats:
    """Process-wide counters of expensive linear-algebra events."""

    factorizations: int = 0
    pcg_solves: int = 0
    _lock: Lock = field(default_factory=Lock, repr=False, compare=False)

    def record_factorization(self) -> None:
        with self._lock:
            self.factorizations += 1

    def record_pcg(self) -> None:
        with self._lock:
            self.pcg_solves += 1

    def reset(self) -> None:
        with self._lock:
            self.factorizations = 0
            self.pcg_solves = 0

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {"factorizations": self.factorizations, "pcg_solves": self.pcg_solves}


factorization_stats = FactorizationStats()


def factorize_spd(matrix: sp.spmatrix, label: str = "matrix") -> spla.SuperLU:
    """Factorize a sparse SPD matrix.

    Args:
        matrix: Square sparse matrix
        label: Name used in log and error messages

    Returns:
        spla.SuperLU: Factorization object with a ``solve`` method

    Raises:
        NumericalFailureError: If the matrix is singular or indefinite
    """
    csc = sp.csc_matrix(matrix)
    if csc.shape[0] != csc.shape[1]:
        raise InvalidArgumentError(f"{label} must be square, got {csc.shape}")
    if not np.all(np.isfinite(csc.data)):
        raise NumericalFailureError(f"{label} has non-finite entries")

    try:
        lu = spla.splu(
            csc,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        logger.error(f"Factorization of {label} failed: {e}")
        raise NumericalFailureError(f"{label} is singular: {e}") from e

    factorization_stats.record_factorization()
    pivots = lu.U.diagonal()
    if not np.all(pivots > 0.0):
        raise NumericalFailureError(
            f"{label} is not positive definite (min pivot {pivots.min():.3e})"
        )
    logger.debug(f"Factorized {label}: n={csc.shape[0]}, nnz(L+U)={lu.L.nnz + lu.U.nnz}")
    return lu


@dataclass(frozen=True)
class SpdFactor:
    """Factorization of the global matrix plus cached contact columns.

    Attributes:
        matrix: The factorized matrix (CSC)
        lu: SuperLU factorization of ``matrix``
        candidates: Sorted contact-candidate DoF indices
        cached: Dense column-major block A^-1 I[:, candidates]
    """

    matrix: sp.csc_matrix
    lu: spla.SuperLU
    candidates: np.ndarray
    cached: np.ndarray
    _column_of: Dict[int, int] = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def solve(self, d: np.ndarray) -> np.ndarray:
        """A^-1 d for a vector or a stack of columns."""
        return self.lu.solve(np.asarray(d, dtype=float))

    def has_candidates(self, dofs: np.ndarray) -> bool:
        return all(int(d) in self._column_of for d in np.asarray(dofs).ravel())

    def cached_columns(self, dofs: np.ndarray) -> np.ndarray:
        """Columns A^-1 e_j for candidate DoFs j, shape (n, len(dofs))."""
        try:
            idx = [self._column_of[int(d)] for d in np.asarray(dofs).ravel()]
        except KeyError as e:
            raise InvalidArgumentError(f"DoF {e.args[0]} is not a declared contact candidate") from e
        return self.cached[:, idx]


def prefactorize(A: sp.spmatrix, contact_candidates: Optional[Sequence[int]] = None) -> SpdFactor:
    """Factorize A and cache A^-1 e_j for every candidate DoF j.

    Args:
        A: SPD matrix (Dirichlet DoFs already eliminated)
        contact_candidates: DoF indices that may become active contacts

    Returns:
        SpdFactor: Factorization with its cached block

    Raises:
        NumericalFailureError: If A is not positive definite
    """
    csc = sp.csc_matrix(A)
    lu = factorize_spd(csc, label="global matrix")
    n = csc.shape[0]
    candidates = np.unique(np.asarray(contact_candidates if contact_candidates is not None else [], dtype=np.int64))
    if candidates.size and (candidates.min() < 0 or candidates.max() >= n):
        raise InvalidArgumentError("Contact candidate DoF out of range")

    if candidates.size:
        rhs = np.zeros((n, candidates.size))
        rhs[candidates, np.arange(candidates.size)] = 1.0
        cached = np.asfortranarray(lu.solve(rhs))
        logger.debug(f"Cached {candidates.size} contact columns")
    else:
        cached = np.zeros((n, 0), order="F")

    return SpdFactor(
        matrix=csc,
        lu=lu,
        candidates=candidates,
        cached=cached,
        _column_of={int(d): i for i, d in enumerate(candidates)},
    )


def solve(factor: SpdFactor, d: np.ndarray) -> np.ndarray:
    """Back-substitution with a prefactorized matrix."""
    d = np.asarray(d, dtype=float)
    if d.shape[0] != factor.size:
        raise InvalidArgumentError(f"Right-hand side has {d.shape[0]} rows, expected {factor.size}")
    return factor.solve(d)
