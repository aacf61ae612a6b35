"""Built-in scene catalog.

Every builder takes a ``resolution`` multiplier so the same code path
produces desk-scale and larger scenes. Builders return a SceneSetup holding
the scene and its default rollout (initial state, time step, step count).
"""

from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional

import numpy as np

from src.energy.materials import MaterialParams
from src.energy.projections import Plane
from src.energy.terms import EnergyStack, MuscleSpec
from src.mesh.hex_mesh import HexMesh, boundary_nodes, build_grid_mesh, build_voxel_mesh, fix_nodes, nodes_where
from src.simulation.scene import Scene
from src.simulation.simulator import Simulator
from src.simulation.state import SolverConfig
from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

DEFAULT_DENSITY = 1e3
DEFAULT_YOUNGS_MODULUS = 1e5
DEFAULT_POISSONS_RATIO = 0.45
DEFAULT_MUSCLE_STIFFNESS = 1e5
GROUND = Plane(normal=np.array([0.0, 0.0, 1.0]), offset=0.0)


@dataclass
class SceneSetup:
    """A scene plus the rollout it is simulated with by default.

    Attributes:
        scene: The simulated body
        x0: Initial positions (3n)
        v0: Initial velocities (3n)
        h: Time step in seconds
        steps: Number of time steps
        f_ext: Optional user external force, (3n,) or (steps, 3n)
        actuation: Optional muscle radii, (groups,) or (steps, groups)
        tracked_node: Node used by end-effector style losses
    """

    scene: Scene
    x0: np.ndarray
    v0: np.ndarray
    h: float
    steps: int
    f_ext: Optional[np.ndarray] = None
    actuation: Optional[np.ndarray] = None
    tracked_node: Optional[int] = None

    @property
    def name(self) -> str:
        return self.scene.name

    @property
    def num_groups(self) -> int:
        return self.scene.num_groups

    def simulator(self, config: Optional[SolverConfig] = None) -> Simulator:
        return Simulator(self.scene, h=self.h, config=config)


def _material(youngs_modulus: float, poissons_ratio: float) -> MaterialParams:
    return MaterialParams(youngs_modulus=youngs_modulus, poissons_ratio=poissons_ratio)


def _bottom_nodes(mesh: HexMesh) -> np.ndarray:
    z_min = mesh.rest_positions[:, 2].min()
    return nodes_where(mesh, lambda p: p[:, 2] < z_min + 1e-9 * mesh.dx)


def _lower_boundary(mesh: HexMesh, fraction: float = 0.5) -> np.ndarray:
    """Boundary nodes in the lowest ``fraction`` of the body height."""
    z = mesh.rest_positions[:, 2]
    cutoff = z.min() + fraction * (z.max() - z.min())
    nodes = boundary_nodes(mesh)
    return nodes[z[nodes] <= cutoff + 1e-9 * mesh.dx]


def _ellipsoid_occupancy(semi_axes_voxels: np.ndarray) -> np.ndarray:
    counts = np.ceil(2.0 * semi_axes_voxels).astype(int)
    centers = [np.arange(c) + 0.5 - c / 2.0 for c in counts]
    gx, gy, gz = np.meshgrid(*centers, indexing="ij")
    r = (gx / semi_axes_voxels[0]) ** 2 + (gy / semi_axes_voxels[1]) ** 2 + (gz / semi_axes_voxels[2]) ** 2
    return r <= 1.0


def _rigid_velocity(positions: np.ndarray, linear: np.ndarray, angular: np.ndarray, center: np.ndarray) -> np.ndarray:
    return (linear[None, :] + np.cross(angular[None, :], positions - center[None, :])).reshape(-1)


def cantilever(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    twist: float = np.pi / 6.0,
    steps: int = 25,
    h: float = 0.01,
    threads: int = 1,
) -> SceneSetup:
    """Beam clamped at x = 0, released from a twist about its axis."""
    dx = 0.01 / resolution
    mesh = build_grid_mesh((12 * resolution, 3 * resolution, 3 * resolution), dx)
    mesh = fix_nodes(mesh, nodes_where(mesh, lambda p: p[:, 0] < 1e-9))
    scene = Scene.build(
        mesh, density, _material(youngs_modulus, poissons_ratio), name="cantilever", threads=threads
    )

    rest = mesh.rest_positions
    length = rest[:, 0].max()
    center = np.array([rest[:, 1].mean(), rest[:, 2].mean()])
    angle = twist * rest[:, 0] / length
    dy, dz = rest[:, 1] - center[0], rest[:, 2] - center[1]
    x0 = rest.copy()
    x0[:, 1] = center[0] + np.cos(angle) * dy - np.sin(angle) * dz
    x0[:, 2] = center[1] + np.sin(angle) * dy + np.cos(angle) * dz
    tip = int(np.argmax(rest[:, 0] + 1e-3 * rest[:, 1] + 1e-6 * rest[:, 2]))
    return SceneSetup(scene, x0.reshape(-1), np.zeros(mesh.num_dofs), h, steps, tracked_node=tip)


def rolling_sphere(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    speed: float = 0.5,
    steps: int = 20,
    h: float = 0.005,
    threads: int = 1,
) -> SceneSetup:
    """Voxelized ball rolling along x on the ground plane."""
    dx = 0.01 / resolution
    radius_voxels = 2.0 * resolution
    occupancy = _ellipsoid_occupancy(np.full(3, radius_voxels))
    mesh = build_voxel_mesh(occupancy, dx)
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        contact_nodes=_lower_boundary(mesh),
        plane=GROUND,
        name="rolling_sphere",
        threads=threads,
    )
    rest = mesh.rest_positions
    center = scene.center_of_mass(rest.reshape(-1))
    radius = center[2] - rest[:, 2].min()
    v0 = _rigid_velocity(rest, np.array([speed, 0.0, 0.0]), np.array([0.0, speed / radius, 0.0]), center)
    return SceneSetup(scene, mesh.rest_vector, v0, h, steps)


def resting_block(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    steps: int = 10,
    h: float = 0.005,
    threads: int = 1,
) -> SceneSetup:
    """Block standing on the ground under gravity."""
    dx = 0.01 / resolution
    mesh = build_grid_mesh((3 * resolution, 3 * resolution, 2 * resolution), dx)
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        contact_nodes=_bottom_nodes(mesh),
        plane=GROUND,
        name="resting_block",
        threads=threads,
    )
    top = int(np.argmax(mesh.rest_positions[:, 2] + 1e-3 * mesh.rest_positions[:, 0]))
    return SceneSetup(scene, mesh.rest_vector, np.zeros(mesh.num_dofs), h, steps, tracked_node=top)


def bouncing_block(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    drop_speed: float = 1.0,
    steps: int = 20,
    h: float = 0.005,
    threads: int = 1,
) -> SceneSetup:
    """Block thrown down onto the ground plane."""
    dx = 0.01 / resolution
    mesh = build_grid_mesh((2 * resolution, 2 * resolution, 2 * resolution), dx, origin=(0.0, 0.0, 0.5 * dx))
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        contact_nodes=_bottom_nodes(mesh),
        plane=GROUND,
        name="bouncing_block",
        threads=threads,
    )
    v0 = np.tile([0.2 * drop_speed, 0.0, -drop_speed], mesh.num_nodes)
    return SceneSetup(scene, mesh.rest_vector, v0, h, steps)


def plant_analog(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    pluck_speed: float = 0.5,
    steps: int = 20,
    h: float = 0.01,
    threads: int = 1,
) -> SceneSetup:
    """Upright stem with a fixed base, plucked sideways."""
    dx = 0.01 / resolution
    mesh = build_grid_mesh((2 * resolution, 2 * resolution, 8 * resolution), dx)
    mesh = fix_nodes(mesh, _bottom_nodes(mesh))
    scene = Scene.build(
        mesh, density, _material(youngs_modulus, poissons_ratio), name="plant_analog", threads=threads
    )
    rest = mesh.rest_positions
    height = rest[:, 2].max()
    v0 = np.zeros_like(rest)
    v0[:, 0] = pluck_speed * (rest[:, 2] / height) ** 2
    top = int(np.argmax(rest[:, 2] + 1e-3 * rest[:, 0]))
    return SceneSetup(scene, mesh.rest_vector, v0.reshape(-1), h, steps, tracked_node=top)


def bunny_analog(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    drop_speed: float = 0.5,
    steps: int = 20,
    h: float = 0.005,
    threads: int = 1,
) -> SceneSetup:
    """Voxelized blob dropped onto the ground."""
    dx = 0.01 / resolution
    occupancy = _ellipsoid_occupancy(np.array([3.0, 2.5, 2.0]) * resolution)
    mesh = build_voxel_mesh(occupancy, dx, origin=(0.0, 0.0, dx))
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        contact_nodes=_lower_boundary(mesh),
        plane=GROUND,
        name="bunny_analog",
        threads=threads,
    )
    v0 = np.tile([0.0, 0.0, -drop_speed], mesh.num_nodes)
    return SceneSetup(scene, mesh.rest_vector, v0, h, steps)


def tendon(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    muscle_stiffness: float = DEFAULT_MUSCLE_STIFFNESS,
    steps: int = 10,
    h: float = 0.01,
    threads: int = 1,
) -> SceneSetup:
    """Upright beam with four vertical muscles (two sides, two heights)."""
    dx = 0.01 / resolution
    counts = (2 * resolution, resolution, 4 * resolution)
    mesh = build_grid_mesh(counts, dx)
    mesh = fix_nodes(mesh, _bottom_nodes(mesh))
    centers = mesh.rest_positions[mesh.elements].mean(axis=1)
    side = (centers[:, 0] > counts[0] * dx / 2.0).astype(np.int64)
    upper = (centers[:, 2] > counts[2] * dx / 2.0).astype(np.int64)
    muscles = MuscleSpec(
        elements=np.arange(mesh.num_elements),
        fibers=np.tile([0.0, 0.0, 1.0], (mesh.num_elements, 1)),
        groups=2 * upper + side,
        stiffness=muscle_stiffness,
        num_groups=4,
    )
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        muscles=muscles,
        name="tendon",
        threads=threads,
    )
    tip = int(np.argmax(mesh.rest_positions[:, 2] + 1e-3 * mesh.rest_positions[:, 0]))
    return SceneSetup(
        scene, mesh.rest_vector, np.zeros(mesh.num_dofs), h, steps, actuation=np.ones(4), tracked_node=tip
    )


def crawler(
    resolution: int = 1,
    youngs_modulus: float = DEFAULT_YOUNGS_MODULUS,
    poissons_ratio: float = DEFAULT_POISSONS_RATIO,
    density: float = DEFAULT_DENSITY,
    muscle_stiffness: float = DEFAULT_MUSCLE_STIFFNESS,
    steps: int = 20,
    h: float = 0.005,
    threads: int = 1,
) -> SceneSetup:
    """Flat box on the ground with two antagonistic muscles along x (front and back halves)."""
    dx = 0.01 / resolution
    counts = (4 * resolution, 2 * resolution, resolution)
    mesh = build_grid_mesh(counts, dx)
    centers = mesh.rest_positions[mesh.elements].mean(axis=1)
    front = (centers[:, 0] > counts[0] * dx / 2.0).astype(np.int64)
    muscles = MuscleSpec(
        elements=np.arange(mesh.num_elements),
        fibers=np.tile([1.0, 0.0, 0.0], (mesh.num_elements, 1)),
        groups=front,
        stiffness=muscle_stiffness,
        num_groups=2,
    )
    scene = Scene.build(
        mesh,
        density,
        _material(youngs_modulus, poissons_ratio),
        muscles=muscles,
        contact_nodes=_bottom_nodes(mesh),
        plane=GROUND,
        name="crawler",
        threads=threads,
    )
    return SceneSetup(scene, mesh.rest_vector, np.zeros(mesh.num_dofs), h, steps, actuation=np.ones(2))


def particle(
    resolution: int = 1,
    density: float = DEFAULT_DENSITY,
    steps: int = 10,
    h: float = 0.01,
    threads: int = 1,
) -> SceneSetup:
    """Single block without elastic energy: free masses under gravity."""
    dx = 0.1 / resolution
    mesh = build_grid_mesh((resolution, resolution, resolution), dx)
    scene = Scene.build(
        mesh, density, _material(DEFAULT_YOUNGS_MODULUS, 0.0), name="particle", threads=threads
    )
    scene = replace(scene, energies=EnergyStack([], mesh.num_dofs, threads))
    return SceneSetup(scene, mesh.rest_vector, np.zeros(mesh.num_dofs), h, steps)


SCENE_CATALOG: Dict[str, Callable[..., SceneSetup]] = {
    "cantilever": cantilever,
    "rolling_sphere": rolling_sphere,
    "resting_block": resting_block,
    "bouncing_block": bouncing_block,
    "plant_analog": plant_analog,
    "bunny_analog": bunny_analog,
    "tendon": tendon,
    "crawler": crawler,
    "particle": particle,
}


def build_scene(name: str, **params) -> SceneSetup:
    """Build a catalog scene by id.

    Raises:
        InvalidArgumentError: If the id is unknown or a parameter is not accepted
    """
    try:
        builder = SCENE_CATALOG[name]
    except KeyError:
        raise InvalidArgumentError(f"Unknown scene '{name}', expected one of {sorted(SCENE_CATALOG)}") from None
    if int(params.get("resolution", 1)) < 1:
        raise InvalidArgumentError("Scene resolution must be at least 1")
    try:
        setup = builder(**params)
    except TypeError as e:
        raise InvalidArgumentError(f"Invalid parameters for scene '{name}': {e}") from e
    logger.info(
        f"Built scene '{name}': {setup.scene.mesh.num_elements} elements, "
        f"{setup.scene.mesh.num_dofs} DoFs, {setup.scene.contact_nodes.size} contact candidates"
    )
    return setup
