"""PD energy terms and the energy stack.

Every term has the quadratic form (w_b/2)|B_b x - z_b*|^2 summed over blocks
b, where B is a constant sparse operator producing one block (a flattened
deformation gradient, a fiber vector or a node position) per row group and
z_b* is the local projection of that block.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from src.energy.materials import MaterialParams, lame_weights
from src.energy.projections import (
    Plane,
    corotated_jacobian,
    fiber_jacobian,
    project_corotated,
    project_fiber,
    project_soft_collision,
    project_volume,
    soft_collision_jacobian,
    volume_jacobian,
)
from src.mesh.deformation import QUADS_PER_ELEMENT, DeformOperator
from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger
from src.utils.parallel import chunked_map

logger = get_logger(__name__)


class EnergyTerm(ABC):
    """One PD energy term.

    Attributes:
        operator: Sparse (num_blocks * block_size, 3n) block operator
        weights: (num_blocks,) per-block weights w_b
    """

    kind: ClassVar[str]
    block_size: ClassVar[int]

    def __init__(self, operator: sp.csr_matrix, weights: np.ndarray):
        self.operator = operator.tocsr()
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights < 0.0):
            raise InvalidArgumentError(f"{self.kind} weights must be non-negative")
        if self.operator.shape[0] != self.num_blocks * self.block_size:
            raise InvalidArgumentError(f"{self.kind} operator does not match its weights")

    @property
    def num_blocks(self) -> int:
        return int(self.weights.shape[0])

    def blocks(self, x: np.ndarray) -> np.ndarray:
        return (self.operator @ x).reshape(self.num_blocks, self.block_size)

    @abstractmethod
    def project(self, blocks: np.ndarray, actuation: Optional[np.ndarray], sl: slice) -> np.ndarray:
        """Project ``blocks`` (the rows ``sl`` of this term) onto the constraint manifold."""

    @abstractmethod
    def jacobian(self, blocks: np.ndarray, actuation: Optional[np.ndarray], sl: slice) -> np.ndarray:
        """Per-block (k, block_size, block_size) projection Jacobians."""

    def energy(self, blocks: np.ndarray, projections: np.ndarray) -> float:
        diff = blocks - projections
        return 0.5 * float(np.dot(self.weights, np.einsum("bi,bi->b", diff, diff)))

    def force(self, blocks: np.ndarray, projections: np.ndarray) -> np.ndarray:
        """Envelope-theorem force -B^T W (Bx - z*)."""
        return -(self.operator.T @ (self.weights[:, None] * (blocks - projections)).ravel())

    def gram(self) -> sp.csr_matrix:
        """B^T W B."""
        w = sp.diags(np.repeat(self.weights, self.block_size))
        return (self.operator.T @ w @ self.operator).tocsr()

    def apply_delta(self, jacobians: np.ndarray, u: np.ndarray) -> np.ndarray:
        """B^T W J B u."""
        bu = (self.operator @ u).reshape(self.num_blocks, self.block_size)
        wjbu = self.weights[:, None] * np.einsum("bij,bj->bi", jacobians, bu)
        return self.operator.T @ wjbu.ravel()

    def hessian(self, jacobians: np.ndarray) -> sp.csr_matrix:
        """B^T blockdiag(w_b (I - J_b)) B."""
        bs = self.block_size
        data = self.weights[:, None, None] * (np.eye(bs)[None] - jacobians)
        nb = self.num_blocks
        middle = sp.bsr_matrix(
            (data, np.arange(nb), np.arange(nb + 1)), shape=(nb * bs, nb * bs)
        )
        return (self.operator.T @ middle @ self.operator).tocsr()


class _ElasticTerm(EnergyTerm):
    """Deformation-gradient term weighted by stiffness times quadrature volume."""

    block_size = 9

    def __init__(self, deform: DeformOperator, stiffness: float):
        if stiffness < 0.0:
            raise InvalidArgumentError(f"{self.kind} stiffness must be non-negative")
        self.stiffness = float(stiffness)
        self.quad_volumes = np.tile(deform.quad_weights, deform.num_elements)
        super().__init__(deform.matrix, self.stiffness * self.quad_volumes)

    def stiffness_sensitivity(self, blocks: np.ndarray, projections: np.ndarray, u: np.ndarray) -> float:
        """u^T d(force)/d(stiffness) at fixed x."""
        bu = (self.operator @ u).reshape(self.num_blocks, self.block_size)
        return -float(np.einsum("b,bi,bi->", self.quad_volumes, bu, blocks - projections))


class CorotatedTerm(_ElasticTerm):
    kind = "corotated"

    def project(self, blocks, actuation, sl):
        return project_corotated(blocks.reshape(-1, 3, 3)).reshape(-1, 9)

    def jacobian(self, blocks, actuation, sl):
        return corotated_jacobian(blocks.reshape(-1, 3, 3))


class VolumeTerm(_ElasticTerm):
    kind = "volume"

    def project(self, blocks, actuation, sl):
        return project_volume(blocks.reshape(-1, 3, 3)).reshape(-1, 9)

    def jacobian(self, blocks, actuation, sl):
        return volume_jacobian(blocks.reshape(-1, 3, 3))


@dataclass(frozen=True)
class MuscleSpec:
    """Fibered elements grouped into independently actuated muscles.

    Attributes:
        elements: (k,) element indices carrying a fiber
        fibers: (k, 3) unit fiber directions in rest coordinates
        groups: (k,) muscle-group index per element
        stiffness: Muscle stiffness in Pa
        num_groups: Number of actuation channels
    """

    elements: np.ndarray
    fibers: np.ndarray
    groups: np.ndarray
    stiffness: float
    num_groups: int


class MuscleTerm(EnergyTerm):
    """Fiber stretch Fm pulled toward the sphere of radius r (the actuation)."""

    kind = "muscle"
    block_size = 3

    def __init__(self, deform: DeformOperator, spec: MuscleSpec):
        elements = np.asarray(spec.elements, dtype=np.int64)
        fibers = np.asarray(spec.fibers, dtype=float).reshape(-1, 3)
        groups = np.asarray(spec.groups, dtype=np.int64)
        if not (elements.shape[0] == fibers.shape[0] == groups.shape[0]):
            raise InvalidArgumentError("Muscle elements, fibers and groups must align")
        if np.any(np.abs(np.linalg.norm(fibers, axis=1) - 1.0) > 1e-12):
            raise InvalidArgumentError("Muscle fiber directions must have unit norm")
        if groups.size and (groups.min() < 0 or groups.max() >= spec.num_groups):
            raise InvalidArgumentError("Muscle group index out of range")
        if spec.stiffness < 0.0:
            raise InvalidArgumentError("Muscle stiffness must be non-negative")

        k = elements.shape[0]
        self.num_groups = int(spec.num_groups)
        self.stiffness = float(spec.stiffness)
        self.fibers = np.repeat(fibers, QUADS_PER_ELEMENT, axis=0)
        self.groups = np.repeat(groups, QUADS_PER_ELEMENT)

        # Contract each F block with its fiber: row (k, q, i) = sum_j m_j F_ij
        blk, q, i, j = np.meshgrid(
            np.arange(k), np.arange(QUADS_PER_ELEMENT), np.arange(3), np.arange(3), indexing="ij"
        )
        rows = (blk * QUADS_PER_ELEMENT + q) * 3 + i
        cols = ((elements[blk] * QUADS_PER_ELEMENT + q) * 3 + i) * 3 + j
        contract = sp.csr_matrix(
            (fibers[blk, j].ravel(), (rows.ravel(), cols.ravel())),
            shape=(k * QUADS_PER_ELEMENT * 3, deform.matrix.shape[0]),
        )
        weights = self.stiffness * np.tile(deform.quad_weights, k)
        super().__init__(contract @ deform.matrix, weights)

    def radii(self, actuation: Optional[np.ndarray], sl: slice = slice(None)) -> np.ndarray:
        groups = self.groups[sl]
        if actuation is None:
            return np.ones(groups.shape[0])
        actuation = np.asarray(actuation, dtype=float)
        if actuation.shape != (self.num_groups,):
            raise InvalidArgumentError(
                f"Expected {self.num_groups} actuation values, got shape {actuation.shape}"
            )
        if np.any(actuation < 0.0):
            raise InvalidArgumentError("Actuation radii must be non-negative")
        return actuation[groups]

    def project(self, blocks, actuation, sl):
        return project_fiber(blocks, self.fibers[sl], self.radii(actuation, sl))

    def jacobian(self, blocks, actuation, sl):
        return fiber_jacobian(blocks, self.radii(actuation, sl))

    def actuation_sensitivity(self, blocks: np.ndarray, u: np.ndarray) -> np.ndarray:
        """u^T d(force)/d(r_g) per group; dp/dr is the unit fiber direction."""
        bu = (self.operator @ u).reshape(self.num_blocks, 3)
        directions = project_fiber(blocks, self.fibers, 1.0)
        per_block = self.weights * np.einsum("bi,bi->b", bu, directions)
        return np.bincount(self.groups, weights=per_block, minlength=self.num_groups)


@dataclass(frozen=True)
class SoftCollisionSpec:
    """Penalty against a plane on selected nodes."""

    nodes: np.ndarray
    plane: Plane
    stiffness: float


class SoftCollisionTerm(EnergyTerm):
    kind = "soft_collision"
    block_size = 3

    def __init__(self, num_dofs: int, spec: SoftCollisionSpec):
        nodes = np.asarray(spec.nodes, dtype=np.int64)
        if spec.stiffness < 0.0:
            raise InvalidArgumentError("Soft-collision stiffness must be non-negative")
        self.plane = spec.plane
        rows = np.arange(3 * nodes.shape[0])
        cols = (3 * nodes[:, None] + np.arange(3)[None, :]).ravel()
        operator = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(rows.shape[0], num_dofs))
        super().__init__(operator, np.full(nodes.shape[0], float(spec.stiffness)))

    def project(self, blocks, actuation, sl):
        return project_soft_collision(blocks, self.plane)

    def jacobian(self, blocks, actuation, sl):
        return soft_collision_jacobian(blocks, self.plane)


@dataclass
class LocalState:
    """Result of the local step: all blocks and their projections at x."""

    x: np.ndarray
    actuation: Optional[np.ndarray]
    blocks: List[np.ndarray]
    projections: List[np.ndarray]
    jacobians: Optional[List[np.ndarray]] = field(default=None)


class EnergyStack:
    """The sum of all energy terms of a scene.

    Example:
        >>> stack = build_energy_stack(deform, MaterialParams(youngs_modulus=1e6, poissons_ratio=0.4))
        >>> local = stack.evaluate(x)
        >>> f = stack.elastic_force(x, local=local)
    """

    def __init__(self, terms: Sequence[EnergyTerm], num_dofs: int, threads: int = 1):
        self.terms = list(terms)
        self.num_dofs = int(num_dofs)
        self.threads = max(1, int(threads))

    def term(self, kind: str) -> Optional[EnergyTerm]:
        for t in self.terms:
            if t.kind == kind:
                return t
        return None

    @property
    def num_groups(self) -> int:
        muscle = self.term("muscle")
        return muscle.num_groups if muscle is not None else 0

    def _map(self, term: EnergyTerm, fn_name: str, blocks: np.ndarray, actuation) -> np.ndarray:
        fn = getattr(term, fn_name)
        return chunked_map(lambda sl: fn(blocks[sl], actuation, sl), term.num_blocks, self.threads)

    def evaluate(self, x: np.ndarray, actuation: Optional[np.ndarray] = None) -> LocalState:
        """Local step: project every block at x."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.num_dofs,):
            raise InvalidArgumentError(f"Expected a vector of {self.num_dofs} entries, got {x.shape}")
        blocks = [t.blocks(x) for t in self.terms]
        projections = [self._map(t, "project", b, actuation) for t, b in zip(self.terms, blocks)]
        return LocalState(x=x, actuation=actuation, blocks=blocks, projections=projections)

    def jacobians(self, local: LocalState, cache: bool = False) -> List[np.ndarray]:
        """Per-term projection Jacobians at the state's x (stored on it when ``cache``)."""
        if local.jacobians is not None:
            return local.jacobians
        jacs = [self._map(t, "jacobian", b, local.actuation) for t, b in zip(self.terms, local.blocks)]
        if cache:
            local.jacobians = jacs
        return jacs

    def energy(self, x: np.ndarray, actuation: Optional[np.ndarray] = None, local: Optional[LocalState] = None) -> float:
        local = local if local is not None else self.evaluate(x, actuation)
        return sum(t.energy(b, p) for t, b, p in zip(self.terms, local.blocks, local.projections))

    def elastic_force(
        self, x: np.ndarray, actuation: Optional[np.ndarray] = None, local: Optional[LocalState] = None
    ) -> np.ndarray:
        local = local if local is not None else self.evaluate(x, actuation)
        force = np.zeros(self.num_dofs)
        for t, b, p in zip(self.terms, local.blocks, local.projections):
            force += t.force(b, p)
        return force

    def stiffness_matrix(self) -> sp.csr_matrix:
        """Sum of w B^T B over all terms."""
        total = sp.csr_matrix((self.num_dofs, self.num_dofs))
        for t in self.terms:
            total = total + t.gram()
        return total.tocsr()

    def delta_a_apply(self, local: LocalState, u: np.ndarray, jacobians: Optional[List[np.ndarray]] = None) -> np.ndarray:
        """Product of the projection correction sum w B^T J B with u."""
        jacs = jacobians if jacobians is not None else self.jacobians(local)
        result = np.zeros(self.num_dofs)
        for t, j in zip(self.terms, jacs):
            result += t.apply_delta(j, u)
        return result

    def hessian(self, local: LocalState, jacobians: Optional[List[np.ndarray]] = None) -> sp.csr_matrix:
        """Energy Hessian sum B^T W (I - J) B at the state's x."""
        jacs = jacobians if jacobians is not None else self.jacobians(local)
        total = sp.csr_matrix((self.num_dofs, self.num_dofs))
        for t, j in zip(self.terms, jacs):
            total = total + t.hessian(j)
        return total.tocsr()

    def material_sensitivity(self, local: LocalState, u: np.ndarray) -> Dict[str, float]:
        """u^T d f_int / d w for the corotated and volume stiffness weights."""
        result = {"corotated": 0.0, "volume": 0.0}
        for t, b, p in zip(self.terms, local.blocks, local.projections):
            if isinstance(t, _ElasticTerm):
                result[t.kind] += t.stiffness_sensitivity(b, p, u)
        return result

    def actuation_sensitivity(self, local: LocalState, u: np.ndarray) -> np.ndarray:
        """u^T d f_int / d r per muscle group."""
        muscle = self.term("muscle")
        if muscle is None:
            return np.zeros(0)
        index = self.terms.index(muscle)
        return muscle.actuation_sensitivity(local.blocks[index], u)


def build_energy_stack(
    deform: DeformOperator,
    material: MaterialParams,
    muscles: Optional[MuscleSpec] = None,
    soft_collision: Optional[SoftCollisionSpec] = None,
    threads: int = 1,
) -> EnergyStack:
    """Assemble the standard stack: corotated + volume, optional muscle and soft collision.

    Terms with zero weight are still created so the stack layout does not
    depend on parameter values.
    """
    w_corotated, w_volume = lame_weights(material)
    terms: List[EnergyTerm] = [CorotatedTerm(deform, w_corotated), VolumeTerm(deform, w_volume)]
    if muscles is not None and len(muscles.elements):
        terms.append(MuscleTerm(deform, muscles))
    if soft_collision is not None and len(soft_collision.nodes):
        terms.append(SoftCollisionTerm(deform.num_dofs, soft_collision))
    logger.debug(
        f"Energy stack: {[t.kind for t in terms]}, w_corotated={w_corotated:.4g}, w_volume={w_volume:.4g}"
    )
    return EnergyStack(terms, deform.num_dofs, threads)


def elastic_force(
    stack: EnergyStack, x: np.ndarray, actuation: Optional[np.ndarray] = None
) -> np.ndarray:
    """f_int(x) = -sum_e w_e G_e^T (G_e x - z_e*(x)) with z* held fixed."""
    return stack.elastic_force(x, actuation)
