"""Shared fixtures: small meshes and scenes that simulate in milliseconds."""

import numpy as np
import pytest

from src.energy.materials import MaterialParams
from src.mesh.hex_mesh import build_grid_mesh, fix_nodes, nodes_where
from src.simulation.scene import Scene
from src.simulation.state import SolverConfig
from src.tasks.scenes import build_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def material():
    return MaterialParams(youngs_modulus=1e4, poissons_ratio=0.3)


@pytest.fixture
def block_mesh():
    """Two elements along x, 0.1 m edges."""
    return build_grid_mesh((2, 1, 1), 0.1)


@pytest.fixture
def free_block(block_mesh, material):
    """Unconstrained two-element block without gravity."""
    return Scene.build(block_mesh, 1e3, material, gravity=[0.0, 0.0, 0.0], name="free_block")


@pytest.fixture
def clamped_beam(material):
    """3x1x1 beam clamped at x = 0, under gravity."""
    mesh = build_grid_mesh((3, 1, 1), 0.1)
    mesh = fix_nodes(mesh, nodes_where(mesh, lambda p: p[:, 0] < 1e-9))
    return Scene.build(mesh, 1e3, material, name="clamped_beam")


@pytest.fixture
def tight_config():
    return SolverConfig(tolerance=1e-10, adjoint_tolerance=1e-12, max_iterations=2000, adjoint_max_iterations=2000)


@pytest.fixture
def particle_setup():
    return build_scene("particle", steps=5)


@pytest.fixture
def cantilever_setup():
    """Desk-scale twisted cantilever, shortened to a few steps."""
    return build_scene("cantilever", steps=4)


@pytest.fixture
def resting_block_setup():
    """Soft block on the ground; soft enough for PD to converge tightly."""
    return build_scene("resting_block", steps=4, youngs_modulus=1e4, poissons_ratio=0.3)


def deformed(x: np.ndarray, rng: np.random.Generator, scale: float = 0.05, dx: float = 0.1) -> np.ndarray:
    """Positions with a random perturbation of ``scale`` times the edge length."""
    return x + scale * dx * rng.standard_normal(x.shape)
