"""Global solves with contact DoFs pinned, via a low-rank update of A.

Pinning the active DoFs C_i decouples them from the rest of the system, which
is the prefactorized A minus the rank-2c_i off-diagonal coupling U V^T with
U = [E_C | PU_R] and V = [PU_R | E_C], where PU_R is A[:, C_i] with rows C_i
zeroed. The Woodbury identity then needs only the cached columns
B1 = A^-1 E_C and one dense 2c_i x 2c_i LU.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from src.sparse_core.factor import SpdFactor
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class ContactSet:
    """Active contact nodes V_i and their DoFs C_i."""

    nodes: np.ndarray

    @classmethod
    def from_nodes(cls, nodes: Sequence[int]) -> "ContactSet":
        return cls(nodes=np.unique(np.asarray(nodes, dtype=np.int64)))

    @classmethod
    def empty(cls) -> "ContactSet":
        return cls(nodes=np.zeros(0, dtype=np.int64))

    @property
    def dofs(self) -> np.ndarray:
        return (3 * self.nodes[:, None] + np.arange(3)[None, :]).ravel()

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    def __len__(self) -> int:
        return self.size

    def same_as(self, other: "ContactSet") -> bool:
        return np.array_equal(self.nodes, other.nodes)


@dataclass(frozen=True)
class LowRankSystem:
    """Woodbury data for one active set.

    Attributes:
        dofs: Active DoFs C_i
        B1: A^-1 E_C (n x c)
        B2: E_C - B1 A_CC (n x c), equal to A^-1 PU_R
        coupling: A[:, C_i] dense (n x c)
        pu_r: ``coupling`` with rows C_i zeroed
        B4: I - V^T [B1 | B2] (2c x 2c)
        lu_piv: LU factorization of B4
    """

    factor: SpdFactor
    dofs: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    coupling: np.ndarray
    pu_r: np.ndarray
    B4: np.ndarray
    lu_piv: Optional[tuple]

    @property
    def rank(self) -> int:
        return int(self.dofs.shape[0])

    def solve(self, d: np.ndarray, x_fixed: Optional[np.ndarray] = None) -> np.ndarray:
        """Solve with C_i pinned to ``x_fixed`` (zero when omitted)."""
        d = np.asarray(d, dtype=float)
        if self.rank == 0:
            return self.factor.solve(d)
        ci = self.dofs
        x_fixed = np.zeros(self.rank) if x_fixed is None else np.asarray(x_fixed, dtype=float)
        if x_fixed.shape != (self.rank,):
            raise InvalidArgumentError(f"Expected {self.rank} fixed values, got {x_fixed.shape}")

        rhs = d - self.coupling @ x_fixed
        rhs[ci] = self.coupling[ci] @ x_fixed
        y1 = self.factor.solve(rhs)
        y2 = np.concatenate([self.pu_r.T @ y1, y1[ci]])
        y3 = sla.lu_solve(self.lu_piv, y2)
        x = y1 + self.B1 @ y3[: self.rank] + self.B2 @ y3[self.rank:]
        x[ci] = x_fixed
        return x


def build_lowrank_system(factor: SpdFactor, active: ContactSet, use_cache: bool = True) -> LowRankSystem:
    """Precompute B1..B4 for an active set.

    Args:
        factor: Prefactorized global matrix with cached candidate columns
        active: Active contact set; every DoF must be a declared candidate
        use_cache: Fetch B1 from the cached block instead of solving for it

    Raises:
        InvalidArgumentError: If an active DoF is not a candidate
        NumericalFailureError: If B4 is singular
    """
    ci = active.dofs
    n = factor.size
    if ci.size and (ci.max() >= n or not factor.has_candidates(ci)):
        raise InvalidArgumentError("Active contact DoFs must be declared contact candidates")
    if ci.size == 0:
        empty = np.zeros((n, 0))
        return LowRankSystem(factor, ci, empty, empty, empty, empty, np.zeros((0, 0)), None)

    c = ci.size
    if use_cache:
        B1 = factor.cached_columns(ci)
    else:
        unit = np.zeros((n, c))
        unit[ci, np.arange(c)] = 1.0
        B1 = factor.solve(unit)

    coupling = factor.matrix[:, ci].toarray()
    A_cc = coupling[ci]
    B2 = -B1 @ A_cc
    B2[ci, np.arange(c)] += 1.0
    pu_r = coupling.copy()
    pu_r[ci] = 0.0

    B3 = np.hstack([B1, B2])
    B4 = np.eye(2 * c) - np.vstack([pu_r.T @ B3, B3[ci]])
    lu_piv = sla.lu_factor(B4, check_finite=True)
    pivots = np.abs(np.diag(lu_piv[0]))
    if pivots.min() <= np.finfo(float).eps * max(1.0, pivots.max()):
        raise NumericalFailureError(f"Low-rank inner matrix is singular ({c} active DoFs)")
    logger.debug(f"Built low-rank system for {c} active DoFs (cache={use_cache})")
    return LowRankSystem(factor, ci, B1, B2, coupling, pu_r, B4, lu_piv)


def lowrank_inner_matrix(factor: SpdFactor, active: ContactSet) -> np.ndarray:
    """B4 = I - V P^T B3 for the active set (empty when no contact)."""
    return build_lowrank_system(factor, active).B4


def solve_dirichlet_lowrank(
    factor: SpdFactor,
    active: ContactSet,
    d: np.ndarray,
    x_fixed: np.ndarray,
    system: Optional[LowRankSystem] = None,
    use_cache: bool = True,
) -> np.ndarray:
    """Solve A x = d with x[C_i] pinned to ``x_fixed``.

    The result satisfies x[C_i] = x_fixed and
    A[~C, ~C] x[~C] = d[~C] - A[~C, C] x_fixed.

    Args:
        factor: Prefactorized global matrix
        active: Active contact set
        d: Right-hand side (3n)
        x_fixed: Prescribed values on the active DoFs, in ``active.dofs`` order
        system: Prebuilt low-rank data for ``active`` (reused across iterations)
        use_cache: Use cached columns when building ``system``

    Returns:
        np.ndarray: Solution vector (3n)
    """
    if system is None:
        system = build_lowrank_system(factor, active, use_cache=use_cache)
    elif not np.array_equal(system.dofs, active.dofs):
        raise InvalidArgumentError("Low-rank system was built for a different active set")
    return system.solve(d, x_fixed)
