"""Scene: a meshed body with its energies, mass, loads and contact setup."""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from src.config.settings import settings
from src.energy.materials import MaterialParams, lame_weights
from src.energy.projections import Plane
from src.energy.terms import EnergyStack, MuscleSpec, SoftCollisionSpec, build_energy_stack
from src.mesh.deformation import DeformOperator, build_deform_operator
from src.mesh.hex_mesh import HexMesh
from src.mesh.mass import LumpedMass, lumped_mass
from src.utils.errors import InvalidArgumentError

# Tolerances of the contact predictor, relative to dx and to the weight
CONTACT_GEOMETRY_EPS = 1e-6
CONTACT_FORCE_EPS = 1e-8


@dataclass(frozen=True)
class Scene:
    """Immutable description of a simulated body.

    Attributes:
        mesh: Mesh with Dirichlet constraints
        deform: Deformation-gradient operator of ``mesh``
        mass: Lumped mass
        material: Elastic material
        energies: Energy stack built from the fields above
        gravity: Gravitational acceleration vector (m/s^2)
        muscles: Optional muscle layout
        soft_collision: Optional penalty collision
        contact_nodes: Candidate nodes V for sticky contact
        plane: Contact plane (required when ``contact_nodes`` is non-empty)
        name: Scene identifier
    """

    mesh: HexMesh
    deform: DeformOperator
    mass: LumpedMass
    material: MaterialParams
    energies: EnergyStack
    gravity: np.ndarray
    muscles: Optional[MuscleSpec] = None
    soft_collision: Optional[SoftCollisionSpec] = None
    contact_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    plane: Optional[Plane] = None
    name: str = "scene"

    @classmethod
    def build(
        cls,
        mesh: HexMesh,
        density: float,
        material: MaterialParams,
        gravity: Optional[Sequence[float]] = None,
        muscles: Optional[MuscleSpec] = None,
        soft_collision: Optional[SoftCollisionSpec] = None,
        contact_nodes: Optional[Sequence[int]] = None,
        plane: Optional[Plane] = None,
        name: str = "scene",
        threads: int = 1,
    ) -> "Scene":
        """Build a scene; gravity defaults to -settings.gravity along z."""
        mesh.validate()
        deform = build_deform_operator(mesh)
        nodes = np.unique(np.asarray(contact_nodes if contact_nodes is not None else [], dtype=np.int64))
        if nodes.size and plane is None:
            raise InvalidArgumentError("Contact candidates need a contact plane")
        if nodes.size and (nodes.min() < 0 or nodes.max() >= mesh.num_nodes):
            raise InvalidArgumentError("Contact candidate node out of range")
        if nodes.size and np.isin(nodes, mesh.dirichlet_dofs // 3).any():
            raise InvalidArgumentError("Contact candidates cannot carry Dirichlet constraints")
        g = np.array([0.0, 0.0, -settings.gravity]) if gravity is None else np.asarray(gravity, dtype=float)
        return cls(
            mesh=mesh,
            deform=deform,
            mass=lumped_mass(mesh, density),
            material=material,
            energies=build_energy_stack(deform, material, muscles, soft_collision, threads),
            gravity=g,
            muscles=muscles,
            soft_collision=soft_collision,
            contact_nodes=nodes,
            plane=plane,
            name=name,
        )

    def with_material(self, material: MaterialParams) -> "Scene":
        """Same body with new elastic weights; a scene without energy terms keeps none."""
        if not self.energies.terms:
            return replace(self, material=material)
        energies = build_energy_stack(
            self.deform, material, self.muscles, self.soft_collision, self.energies.threads
        )
        return replace(self, material=material, energies=energies)

    def with_threads(self, threads: int) -> "Scene":
        energies = EnergyStack(self.energies.terms, self.energies.num_dofs, threads)
        return replace(self, energies=energies)

    @property
    def has_contact(self) -> bool:
        return self.contact_nodes.size > 0

    @property
    def candidate_dofs(self) -> np.ndarray:
        return (3 * self.contact_nodes[:, None] + np.arange(3)[None, :]).ravel()

    @property
    def num_groups(self) -> int:
        return self.energies.num_groups

    def gravity_force(self) -> np.ndarray:
        """M g as a 3n vector."""
        return self.mass.diagonal * np.tile(self.gravity, self.mesh.num_nodes)

    def force_scale(self) -> float:
        """Weight of the body, or 1 N when gravity is off."""
        weight = self.mass.total * float(np.linalg.norm(self.gravity))
        return weight if weight > 0.0 else 1.0

    @property
    def contact_geometry_eps(self) -> float:
        return CONTACT_GEOMETRY_EPS * self.mesh.dx

    @property
    def contact_force_eps(self) -> float:
        return CONTACT_FORCE_EPS * self.force_scale()

    def center_of_mass(self, x: np.ndarray) -> np.ndarray:
        """Mass-weighted mean of nodal positions."""
        m = self.mass.node_masses
        return (m[:, None] * np.asarray(x).reshape(-1, 3)).sum(axis=0) / m.sum()

    def factor_key(self, h: float) -> Tuple:
        """Everything the prefactorized global matrix depends on."""
        weights = tuple(float(np.sum(t.weights)) for t in self.energies.terms)
        return (
            float(h),
            self.mass.density,
            lame_weights(self.material),
            tuple(t.kind for t in self.energies.terms),
            weights,
            self.mesh.dirichlet_dofs.tobytes(),
            self.candidate_dofs.tobytes(),
            self.mesh.num_dofs,
        )
