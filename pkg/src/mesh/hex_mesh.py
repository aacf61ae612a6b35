"""Hexahedral mesh construction.

This module builds regular and voxelized hexahedral meshes with lexicographic
(x-fastest) node ordering and manages Dirichlet constraints on nodal DoFs.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

# Lattice offsets of the 8 corners in trilinear shape-function order
HEX_CORNER_OFFSETS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ],
    dtype=np.int64,
)

# Local corner indices of the 6 faces
HEX_FACES = np.array(
    [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [0, 4, 7, 3],
        [1, 2, 6, 5],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class HexMesh:
    """Hexahedral mesh with uniform element edge length.

    Attributes:
        rest_positions: (n, 3) rest nodal positions in meters
        elements: (m, 8) node indices per element in trilinear corner order
        dx: Element edge length in meters
        dirichlet_dofs: Sorted unique constrained DoF indices
        dirichlet_values: Prescribed values for ``dirichlet_dofs``
    """

    rest_positions: np.ndarray
    elements: np.ndarray
    dx: float
    dirichlet_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dirichlet_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_nodes(self) -> int:
        return int(self.rest_positions.shape[0])

    @property
    def num_elements(self) -> int:
        return int(self.elements.shape[0])

    @property
    def num_dofs(self) -> int:
        return 3 * self.num_nodes

    @property
    def element_volume(self) -> float:
        return float(self.dx) ** 3

    @property
    def volume(self) -> float:
        return self.num_elements * self.element_volume

    @property
    def rest_vector(self) -> np.ndarray:
        """Rest positions as a stacked 3n vector."""
        return self.rest_positions.reshape(-1).copy()

    def free_mask(self) -> np.ndarray:
        """Boolean mask over DoFs, True where the DoF is not Dirichlet."""
        mask = np.ones(self.num_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return mask

    def validate(self) -> None:
        """Check the structural invariants of the mesh.

        Raises:
            InvalidArgumentError: If any invariant is violated
        """
        if self.dx <= 0:
            raise InvalidArgumentError(f"Element edge length must be positive, got {self.dx}")
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise InvalidArgumentError("Elements must be an (m, 8) index array")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= self.num_nodes):
            raise InvalidArgumentError("Element refers to a node index out of range")
        sorted_nodes = np.sort(self.elements, axis=1)
        if np.any(sorted_nodes[:, 1:] == sorted_nodes[:, :-1]):
            raise InvalidArgumentError("Every element must have 8 distinct nodes")
        dofs = self.dirichlet_dofs
        if dofs.size:
            if dofs.min() < 0 or dofs.max() >= self.num_dofs:
                raise InvalidArgumentError("Dirichlet DoF index out of range")
            if np.unique(dofs).size != dofs.size:
                raise InvalidArgumentError("Dirichlet DoF indices must be unique")
        if dofs.shape != self.dirichlet_values.shape:
            raise InvalidArgumentError("Dirichlet values must match Dirichlet DoFs")


def _lattice_index(ijk: np.ndarray, node_counts: np.ndarray) -> np.ndarray:
    return ijk[..., 0] + node_counts[0] * (ijk[..., 1] + node_counts[1] * ijk[..., 2])


def build_voxel_mesh(
    occupancy: np.ndarray,
    dx: float,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> HexMesh:
    """Build a hexahedral mesh from a boolean voxel grid.

    Lattice nodes not touched by any occupied voxel are dropped; the remaining
    nodes keep their lexicographic (x-fastest) order.

    Args:
        occupancy: Boolean array of shape (cx, cy, cz)
        dx: Voxel edge length in meters
        origin: Position of lattice node (0, 0, 0)

    Returns:
        HexMesh: Mesh with one element per occupied voxel

    Raises:
        InvalidArgumentError: If dx is not positive or the grid is empty
    """
    occupancy = np.asarray(occupancy, dtype=bool)
    if occupancy.ndim != 3:
        raise InvalidArgumentError("Occupancy grid must be three-dimensional")
    if not dx > 0:
        raise InvalidArgumentError(f"Element edge length must be positive, got {dx}")
    if not occupancy.any():
        raise InvalidArgumentError("Occupancy grid has no occupied voxels")

    node_counts = np.array(occupancy.shape, dtype=np.int64) + 1
    # Voxels in lexicographic x-fastest order
    voxels = np.argwhere(occupancy.transpose(2, 1, 0))[:, ::-1]
    corners = voxels[:, None, :] + HEX_CORNER_OFFSETS[None, :, :]
    lattice = _lattice_index(corners, node_counts)

    used, elements = np.unique(lattice, return_inverse=True)
    elements = elements.reshape(lattice.shape).astype(np.int64)

    ijk = np.stack(
        [
            used % node_counts[0],
            (used // node_counts[0]) % node_counts[1],
            used // (node_counts[0] * node_counts[1]),
        ],
        axis=1,
    )
    rest = np.asarray(origin, dtype=float)[None, :] + dx * ijk.astype(float)

    mesh = HexMesh(rest_positions=rest, elements=elements, dx=float(dx))
    logger.debug(
        f"Built voxel mesh: {mesh.num_elements} elements, {mesh.num_nodes} nodes"
    )
    return mesh


def build_grid_mesh(
    counts: Sequence[int],
    dx: float,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> HexMesh:
    """Build a regular box of hexahedral elements.

    Args:
        counts: Number of elements along x, y and z
        dx: Element edge length in meters
        origin: Position of the minimum corner

    Returns:
        HexMesh: Mesh with counts.x*counts.y*counts.z elements

    Raises:
        InvalidArgumentError: If a count is below 1 or dx is not positive

    Example:
        >>> mesh = build_grid_mesh((32, 8, 8), 0.01)
        >>> mesh.num_elements, mesh.num_nodes, mesh.num_dofs
        (2048, 2673, 8019)
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 1:
        raise InvalidArgumentError(f"Element counts must be three integers >= 1, got {counts}")
    if not dx > 0:
        raise InvalidArgumentError(f"Element edge length must be positive, got {dx}")
    return build_voxel_mesh(np.ones(counts, dtype=bool), dx, origin)


def with_dirichlet(mesh: HexMesh, dofs: Sequence[int], values: Sequence[float]) -> HexMesh:
    """Return a copy of the mesh with additional Dirichlet constraints.

    Args:
        mesh: Source mesh
        dofs: Constrained DoF indices
        values: Prescribed values, one per DoF

    Returns:
        HexMesh: Mesh whose constraint set is the union (new values win)
    """
    dofs = np.asarray(dofs, dtype=np.int64).reshape(-1)
    values = np.asarray(values, dtype=float).reshape(-1)
    if dofs.shape != values.shape:
        raise InvalidArgumentError("Dirichlet DoFs and values must have the same length")
    if np.unique(dofs).size != dofs.size:
        raise InvalidArgumentError("Dirichlet DoF indices must be unique")
    if dofs.size and (dofs.min() < 0 or dofs.max() >= mesh.num_dofs):
        raise InvalidArgumentError("Dirichlet DoF index out of range")

    merged = dict(zip(mesh.dirichlet_dofs.tolist(), mesh.dirichlet_values.tolist()))
    merged.update(zip(dofs.tolist(), values.tolist()))
    keys = np.array(sorted(merged), dtype=np.int64)
    vals = np.array([merged[k] for k in keys.tolist()], dtype=float)
    return replace(mesh, dirichlet_dofs=keys, dirichlet_values=vals)


def fix_nodes(mesh: HexMesh, nodes: Sequence[int]) -> HexMesh:
    """Pin all three DoFs of the given nodes at their rest positions."""
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
    dofs = (3 * nodes[:, None] + np.arange(3)[None, :]).reshape(-1)
    return with_dirichlet(mesh, dofs, mesh.rest_positions[nodes].reshape(-1))


def nodes_where(mesh: HexMesh, predicate: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Indices of nodes whose rest position satisfies ``predicate``.

    Example:
        >>> root = nodes_where(mesh, lambda p: p[:, 0] < 1e-9)
    """
    return np.flatnonzero(predicate(mesh.rest_positions)).astype(np.int64)


def boundary_nodes(mesh: HexMesh) -> np.ndarray:
    """Indices of nodes lying on a boundary face of the mesh."""
    faces = mesh.elements[:, HEX_FACES].reshape(-1, 4)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    on_boundary = counts[inverse.reshape(-1)] == 1
    return np.unique(faces[on_boundary]).astype(np.int64)
