"""Lumped mass assembly."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from src.mesh.hex_mesh import HexMesh
from src.utils.errors import InvalidArgumentError


@dataclass(frozen=True)
class LumpedMass:
    """Diagonal mass matrix.

    Attributes:
        node_masses: (n,) nodal masses in kg
        density: Density used for assembly in kg/m^3
    """

    node_masses: np.ndarray
    density: float

    @property
    def diagonal(self) -> np.ndarray:
        """Per-DoF diagonal entries (3n,)."""
        return np.repeat(self.node_masses, 3)

    @property
    def total(self) -> float:
        return float(self.node_masses.sum())

    def matrix(self) -> sp.dia_matrix:
        return sp.diags(self.diagonal)


def lumped_mass(mesh: HexMesh, density: float) -> LumpedMass:
    """Distribute each element's mass equally among its 8 nodes.

    Args:
        mesh: Hexahedral mesh
        density: Material density in kg/m^3

    Returns:
        LumpedMass: Nodal masses summed over incident elements

    Raises:
        InvalidArgumentError: If density is not positive

    Example:
        >>> mass = lumped_mass(build_grid_mesh((1, 1, 1), 1.0), 1.0)
        >>> mass.node_masses
        array([0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125])
    """
    if not density > 0:
        raise InvalidArgumentError(f"Density must be positive, got {density}")
    share = density * mesh.element_volume / 8.0
    counts = np.bincount(mesh.elements.reshape(-1), minlength=mesh.num_nodes)
    return LumpedMass(node_masses=share * counts.astype(float), density=float(density))
