"""Scalar losses on trajectories and their per-frame gradients."""

from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.backprop.gradients import LossGradient
from src.simulation.scene import Scene
from src.simulation.state import Trajectory
from src.utils.errors import InvalidArgumentError


class LossKind(str, Enum):
    WEIGHTED_FINAL_STATE = "weighted_final_state"
    COM_TARGET = "com_target"
    FORWARD_PROGRESS = "forward_progress"
    TRAJECTORY_MATCH = "trajectory_match"


class LossSpec(BaseModel):
    """Loss configuration.

    Attributes:
        kind: Loss family
        seed: Seed of the random weights of weighted_final_state
        per_step: Sum the loss over frames 1..N instead of reading frame N only
        target: Target point for com_target (meters)
        node: Track this node instead of the center of mass (com_target)
        axis: Progress axis for forward_progress
        up_weight: Extra reward on the center-of-mass height (forward_progress)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LossKind = LossKind.WEIGHTED_FINAL_STATE
    seed: int = Field(default=0, ge=0)
    per_step: bool = False
    target: Optional[List[float]] = None
    node: Optional[int] = Field(default=None, ge=0)
    axis: int = Field(default=0, ge=0, le=2)
    up_weight: float = 0.0


def random_weights(seed: int, num_dofs: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded weights for positions and velocities, each of unit norm."""
    rng = np.random.default_rng(seed)
    wx = rng.standard_normal(num_dofs)
    wv = rng.standard_normal(num_dofs)
    return wx / np.linalg.norm(wx), wv / np.linalg.norm(wv)


def _frames(trajectory: Trajectory, per_step: bool) -> List[int]:
    return list(range(1, trajectory.steps + 1)) if per_step else [trajectory.steps]


def weighted_final_state(
    trajectory: Trajectory, wx: np.ndarray, wv: np.ndarray, per_step: bool = False
) -> Tuple[float, LossGradient]:
    """L = sum over frames of wx.x_k + wv.v_k."""
    positions, velocities = trajectory.positions, trajectory.velocities
    grad = LossGradient.zeros(trajectory.steps, positions.shape[1])
    value = 0.0
    for k in _frames(trajectory, per_step):
        value += float(np.dot(wx, positions[k]) + np.dot(wv, velocities[k]))
        grad.dx[k] += wx
        grad.dv[k] += wv
    return value, grad


def _com_weights(scene: Scene) -> np.ndarray:
    """d(com)/dx as a (3, 3n) matrix."""
    m = scene.mass.node_masses / scene.mass.node_masses.sum()
    weights = np.zeros((3, scene.mesh.num_dofs))
    for axis in range(3):
        weights[axis, axis::3] = m
    return weights


def _tracked_point(scene: Scene, node: Optional[int]) -> np.ndarray:
    if node is None:
        return _com_weights(scene)
    if node >= scene.mesh.num_nodes:
        raise InvalidArgumentError(f"Tracked node {node} out of range")
    weights = np.zeros((3, scene.mesh.num_dofs))
    weights[np.arange(3), 3 * node + np.arange(3)] = 1.0
    return weights


def com_target(
    scene: Scene,
    trajectory: Trajectory,
    target: np.ndarray,
    node: Optional[int] = None,
    per_step: bool = False,
) -> Tuple[float, LossGradient]:
    """Squared distance of the center of mass (or one node) to ``target``."""
    target = np.asarray(target, dtype=float)
    if target.shape != (3,):
        raise InvalidArgumentError("com_target needs a 3D target point")
    weights = _tracked_point(scene, node)
    positions = trajectory.positions
    grad = LossGradient.zeros(trajectory.steps, positions.shape[1])
    value = 0.0
    for k in _frames(trajectory, per_step):
        diff = weights @ positions[k] - target
        value += float(np.dot(diff, diff))
        grad.dx[k] += 2.0 * weights.T @ diff
    return value, grad


def forward_progress(
    scene: Scene, trajectory: Trajectory, axis: int = 0, up_weight: float = 0.0
) -> Tuple[float, LossGradient]:
    """Negated final center-of-mass coordinate along ``axis``, minus up_weight times its height."""
    weights = _com_weights(scene)
    direction = -weights[axis] - up_weight * weights[2]
    positions = trajectory.positions
    grad = LossGradient.zeros(trajectory.steps, positions.shape[1])
    grad.dx[-1] = direction
    return float(np.dot(direction, positions[-1])), grad


def trajectory_match(trajectory: Trajectory, reference: np.ndarray) -> Tuple[float, LossGradient]:
    """Sum over frames 1..N of the squared position difference to ``reference``.

    Args:
        trajectory: Simulated rollout
        reference: (N + 1, 3n) reference positions (frame 0 is ignored)
    """
    positions = trajectory.positions
    reference = np.asarray(reference, dtype=float)
    if reference.shape != positions.shape:
        raise InvalidArgumentError(f"Reference positions must have shape {positions.shape}, got {reference.shape}")
    diff = positions - reference
    diff[0] = 0.0
    grad = LossGradient.zeros(trajectory.steps, positions.shape[1])
    grad.dx[:] = 2.0 * diff
    return float(np.sum(diff * diff)), grad


def evaluate_loss(
    spec: LossSpec,
    scene: Scene,
    trajectory: Trajectory,
    reference: Optional[np.ndarray] = None,
) -> Tuple[float, LossGradient]:
    """Dispatch on ``spec.kind``.

    Raises:
        InvalidArgumentError: If a required input (target, reference) is missing
    """
    if spec.kind is LossKind.WEIGHTED_FINAL_STATE:
        wx, wv = random_weights(spec.seed, scene.mesh.num_dofs)
        return weighted_final_state(trajectory, wx, wv, spec.per_step)
    if spec.kind is LossKind.COM_TARGET:
        if spec.target is None:
            raise InvalidArgumentError("com_target loss needs a target")
        return com_target(scene, trajectory, np.asarray(spec.target), spec.node, spec.per_step)
    if spec.kind is LossKind.FORWARD_PROGRESS:
        return forward_progress(scene, trajectory, spec.axis, spec.up_weight)
    if reference is None:
        raise InvalidArgumentError("trajectory_match loss needs reference positions")
    return trajectory_match(trajectory, reference)
