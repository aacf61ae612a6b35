"""Global matrix assembly with Dirichlet elimination."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from src.energy.terms import EnergyStack
from src.mesh.hex_mesh import HexMesh
from src.mesh.mass import LumpedMass
from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class GlobalSystem:
    """The PD global matrix and the data it was built from.

    Attributes:
        A_full: M/h^2 + sum w G^T G without elimination
        A: A_full with Dirichlet rows and columns replaced by identity
        stiffness: sum w G^T G
        mass_over_h2: Per-DoF diagonal of M/h^2
        free_mask: True on non-Dirichlet DoFs
        dirichlet_dofs: Constrained DoF indices
        dirichlet_values: Prescribed values
        h: Time step in seconds
    """

    A_full: sp.csr_matrix
    A: sp.csr_matrix
    stiffness: sp.csr_matrix
    mass_over_h2: np.ndarray
    free_mask: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    h: float

    @property
    def num_dofs(self) -> int:
        return int(self.mass_over_h2.shape[0])


def eliminate(matrix: sp.spmatrix, fixed_mask: np.ndarray) -> sp.csr_matrix:
    """Replace rows and columns of fixed DoFs by those of the identity."""
    fixed_mask = np.asarray(fixed_mask, dtype=bool)
    keep = sp.diags((~fixed_mask).astype(float))
    return (keep @ matrix @ keep + sp.diags(fixed_mask.astype(float))).tocsr()


def assemble_stiffness(energies: EnergyStack) -> sp.csr_matrix:
    """sum_e w_e G_e^T G_e over all terms (no mass, no elimination)."""
    return energies.stiffness_matrix()


def assemble_global(mesh: HexMesh, energies: EnergyStack, mass: LumpedMass, h: float) -> GlobalSystem:
    """Assemble A = M/h^2 + sum_e w_e G_e^T G_e with Dirichlet DoFs eliminated.

    Args:
        mesh: Mesh carrying the Dirichlet constraints
        energies: Energy stack with current weights
        mass: Lumped mass
        h: Time step in seconds

    Returns:
        GlobalSystem: Full and eliminated matrices

    Raises:
        InvalidArgumentError: If h is not positive or sizes mismatch
    """
    if not h > 0:
        raise InvalidArgumentError(f"Time step must be positive, got {h}")
    if energies.num_dofs != mesh.num_dofs or mass.diagonal.shape[0] != mesh.num_dofs:
        raise InvalidArgumentError("Energy stack, mass and mesh sizes do not match")

    mass_over_h2 = mass.diagonal / h**2
    stiffness = assemble_stiffness(energies)
    A_full = (sp.diags(mass_over_h2) + stiffness).tocsr()
    free = mesh.free_mask()
    A = eliminate(A_full, ~free)
    logger.debug(f"Assembled global matrix: n={A.shape[0]}, nnz={A.nnz}, h={h}")
    return GlobalSystem(
        A_full=A_full,
        A=A,
        stiffness=stiffness,
        mass_over_h2=mass_over_h2,
        free_mask=free,
        dirichlet_dofs=mesh.dirichlet_dofs,
        dirichlet_values=mesh.dirichlet_values,
        h=float(h),
    )
