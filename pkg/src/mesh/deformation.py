"""Deformation-gradient operators for trilinear hexahedra.

Each element carries 8 Gauss points at ±1/√3 in reference coordinates with
weight dx³/8. Because every element of a voxel mesh has the same shape, the
shape-function gradients are stored once and the sparse global operator G
maps the 3n nodal vector to all (element, quad) deformation gradients.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from src.mesh.hex_mesh import HEX_CORNER_OFFSETS, HexMesh
from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

GAUSS_POINT = 1.0 / np.sqrt(3.0)
QUADS_PER_ELEMENT = 8


def gauss_points() -> np.ndarray:
    """The 2x2x2 Gauss points in reference coordinates, x-fastest."""
    pts_1d = np.array([-GAUSS_POINT, GAUSS_POINT])
    return np.array([[i, j, k] for k in pts_1d for j in pts_1d for i in pts_1d])


def shape_functions(xi: np.ndarray) -> np.ndarray:
    """Trilinear shape functions at reference point(s) ``xi`` (..., 3) -> (..., 8)."""
    signs = 2.0 * HEX_CORNER_OFFSETS - 1.0
    xi = np.asarray(xi, dtype=float)
    return 0.125 * np.prod(1.0 + xi[..., None, :] * signs, axis=-1)


def shape_gradients(xi: np.ndarray, dx: float) -> np.ndarray:
    """Physical gradients dN_a/dX at reference point(s) ``xi`` (..., 3) -> (..., 8, 3)."""
    signs = 2.0 * HEX_CORNER_OFFSETS - 1.0
    xi = np.asarray(xi, dtype=float)
    factors = 1.0 + xi[..., None, :] * signs
    grads = np.empty(factors.shape)
    for d in range(3):
        others = [k for k in range(3) if k != d]
        grads[..., d] = 0.125 * signs[:, d] * factors[..., others[0]] * factors[..., others[1]]
    # dxi/dX = 2/dx for an axis-aligned cube
    return grads * (2.0 / dx)


@dataclass(frozen=True)
class DeformOperator:
    """Constant operator from nodal positions to quadrature deformation gradients.

    Attributes:
        elements: (m, 8) element node indices
        shape_grads: (8, 8, 3) dN_a/dX per quadrature point, shared by all elements
        quad_weights: (8,) quadrature weights in m^3
        matrix: Sparse (m*8*9, 3n) operator; rows ordered (element, quad, F_ij row-major)
        num_dofs: 3n
    """

    elements: np.ndarray
    shape_grads: np.ndarray
    quad_weights: np.ndarray
    matrix: sp.csr_matrix
    num_dofs: int

    @property
    def num_elements(self) -> int:
        return int(self.elements.shape[0])


def build_deform_operator(mesh: HexMesh) -> DeformOperator:
    """Assemble the deformation-gradient operator of a mesh.

    Args:
        mesh: Hexahedral mesh

    Returns:
        DeformOperator: Operator with F_eq = G_eq x
    """
    grads = shape_gradients(gauss_points(), mesh.dx)
    weights = np.full(QUADS_PER_ELEMENT, mesh.element_volume / QUADS_PER_ELEMENT)

    m = mesh.num_elements
    e, q, i, j, a = np.meshgrid(
        np.arange(m), np.arange(QUADS_PER_ELEMENT), np.arange(3), np.arange(3), np.arange(8),
        indexing="ij",
    )
    rows = ((e * QUADS_PER_ELEMENT + q) * 3 + i) * 3 + j
    cols = 3 * mesh.elements[e, a] + i
    vals = grads[q, a, j]
    matrix = sp.csr_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())),
        shape=(m * QUADS_PER_ELEMENT * 9, mesh.num_dofs),
    )
    logger.debug(f"Assembled deformation operator with {matrix.nnz} nonzeros")
    return DeformOperator(
        elements=mesh.elements,
        shape_grads=grads,
        quad_weights=weights,
        matrix=matrix,
        num_dofs=mesh.num_dofs,
    )


def deformation_gradients(op: DeformOperator, x: np.ndarray) -> np.ndarray:
    """All deformation gradients at ``x``.

    Args:
        op: Deformation operator
        x: Stacked 3n position vector

    Returns:
        np.ndarray: (m, 8, 3, 3) array of F per element and quadrature point
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (op.num_dofs,):
        raise InvalidArgumentError(f"Expected a vector of {op.num_dofs} entries, got {x.shape}")
    nodal = x.reshape(-1, 3)[op.elements]
    return np.einsum("mai,qaj->mqij", nodal, op.shape_grads)


def deformation_gradient(op: DeformOperator, x: np.ndarray, element: int, quad: int) -> np.ndarray:
    """Deformation gradient of one element at one quadrature point.

    Args:
        op: Deformation operator
        x: Stacked 3n position vector
        element: Element index
        quad: Quadrature point index in [0, 8)

    Returns:
        np.ndarray: 3x3 deformation gradient

    Raises:
        InvalidArgumentError: If an index is out of range or x has the wrong size
    """
    if not 0 <= element < op.num_elements:
        raise InvalidArgumentError(f"Element index {element} out of range")
    if not 0 <= quad < QUADS_PER_ELEMENT:
        raise InvalidArgumentError(f"Quadrature index {quad} out of range")
    x = np.asarray(x, dtype=float)
    if x.shape != (op.num_dofs,):
        raise InvalidArgumentError(f"Expected a vector of {op.num_dofs} entries, got {x.shape}")
    nodal = x.reshape(-1, 3)[op.elements[element]]
    return nodal.T @ op.shape_grads[quad]
