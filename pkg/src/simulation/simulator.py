"""Trajectory simulation with a cached global factorization.

The prefactorized matrix A depends only on mass, h, energy weights, the
Dirichlet set and the contact candidates. The simulator refactorizes when
that key changes and never per time step.
"""

import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from src.config.settings import settings
from src.mesh.hex_mesh import HexMesh
from src.mesh.snapshot import write_snapshot
from src.simulation.contact import step_with_contact
from src.simulation.newton_solver import step_newton
from src.simulation.pd_solver import step_pd
from src.simulation.scene import Scene
from src.simulation.state import SimState, SolverConfig, StepRecord, Trajectory
from src.simulation.timing import PhaseTimer
from src.sparse_core.assembly import GlobalSystem, assemble_global
from src.sparse_core.factor import SpdFactor, prefactorize
from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)


def default_timestep(scene: Scene) -> float:
    return settings.timestep_contact if scene.has_contact else settings.timestep_contact_free


class Simulator:
    """Forward simulator for one scene.

    Example:
        >>> sim = Simulator(scene, h=0.01, config=SolverConfig(tolerance=1e-6))
        >>> trajectory = sim.simulate(scene.mesh.rest_vector, np.zeros(scene.mesh.num_dofs), 25)
    """

    def __init__(self, scene: Scene, h: Optional[float] = None, config: Optional[SolverConfig] = None):
        self.config = config or SolverConfig()
        self.h = float(h) if h is not None else default_timestep(scene)
        if not self.h > 0:
            raise InvalidArgumentError(f"Time step must be positive, got {self.h}")
        self._factor: Optional[SpdFactor] = None
        self._system: Optional[GlobalSystem] = None
        self._key = None
        self.refresh_count = 0
        self.set_scene(scene)

    def set_scene(self, scene: Scene) -> None:
        """Swap the scene; the factorization is refreshed lazily if its key changed."""
        if scene.energies.threads != self.config.threads:
            scene = scene.with_threads(self.config.threads)
        self.scene = scene

    def _refresh(self) -> None:
        key = self.scene.factor_key(self.h)
        if key == self._key and self._factor is not None:
            return
        system = assemble_global(self.scene.mesh, self.scene.energies, self.scene.mass, self.h)
        try:
            self._factor = prefactorize(system.A, self.scene.candidate_dofs)
        except NumericalFailureError as e:
            logger.error(f"Global matrix factorization failed: {e}")
            raise
        self._system = system
        self._key = key
        self.refresh_count += 1
        logger.info(f"Refactorized global matrix for scene '{self.scene.name}' (refresh {self.refresh_count})")

    @property
    def factor(self) -> SpdFactor:
        self._refresh()
        return self._factor

    @property
    def system(self) -> GlobalSystem:
        self._refresh()
        return self._system

    def total_force(self, f_ext: Optional[np.ndarray]) -> np.ndarray:
        gravity = self.scene.gravity_force()
        if f_ext is None:
            return gravity
        f_ext = np.asarray(f_ext, dtype=float)
        if f_ext.shape != gravity.shape:
            raise InvalidArgumentError(f"External force must have {gravity.shape[0]} entries")
        return f_ext + gravity

    def step(
        self,
        state: SimState,
        f_ext: Optional[np.ndarray] = None,
        actuation: Optional[np.ndarray] = None,
        timer: Optional[PhaseTimer] = None,
    ) -> StepRecord:
        """Advance one step; ``f_ext`` excludes gravity, which is added here."""
        force = self.total_force(f_ext)
        if self.scene.has_contact:
            factor = None if self.config.method.is_newton else self.factor
            return step_with_contact(self.scene, factor, state, force, self.h, self.config, actuation, timer)
        if self.config.method.is_newton:
            return step_newton(self.scene, state, force, self.h, self.config, actuation, timer=timer)
        return step_pd(self.scene, self.factor, state, force, self.h, self.config, actuation, timer)

    def initial_state(self, x0: np.ndarray, v0: np.ndarray) -> SimState:
        """State with Dirichlet values imposed on x0 and zero velocity on Dirichlet DoFs."""
        n = self.scene.mesh.num_dofs
        x0 = np.array(x0, dtype=float)
        v0 = np.array(v0, dtype=float)
        if x0.shape != (n,) or v0.shape != (n,):
            raise InvalidArgumentError(f"Initial state vectors must have {n} entries")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(v0))):
            raise InvalidArgumentError("Initial state must be finite")
        mesh = self.scene.mesh
        x0[mesh.dirichlet_dofs] = mesh.dirichlet_values
        v0[mesh.dirichlet_dofs] = 0.0
        return SimState(x=x0, v=v0, step=0)

    def expand_forces(self, f_ext: Optional[np.ndarray], steps: int) -> np.ndarray:
        n = self.scene.mesh.num_dofs
        if f_ext is None:
            return np.zeros((steps, n))
        f_ext = np.asarray(f_ext, dtype=float)
        if f_ext.shape == (n,):
            return np.tile(f_ext, (steps, 1))
        if f_ext.shape != (steps, n):
            raise InvalidArgumentError(f"External forces must have shape ({steps}, {n}) or ({n},)")
        return f_ext

    def expand_actuation(self, actuation: Optional[np.ndarray], steps: int) -> Optional[np.ndarray]:
        groups = self.scene.num_groups
        if actuation is None:
            return None
        actuation = np.asarray(actuation, dtype=float)
        if actuation.shape == (groups,):
            return np.tile(actuation, (steps, 1))
        if actuation.shape != (steps, groups):
            raise InvalidArgumentError(f"Actuation must have shape ({steps}, {groups}) or ({groups},)")
        return actuation

    def simulate(
        self,
        x0: np.ndarray,
        v0: np.ndarray,
        steps: int,
        f_ext: Optional[np.ndarray] = None,
        actuation: Optional[np.ndarray] = None,
    ) -> Trajectory:
        """Roll out ``steps`` time steps.

        Args:
            x0: Initial positions (Dirichlet values are imposed)
            v0: Initial velocities
            steps: Number of steps (0 gives an empty trajectory)
            f_ext: User external forces, (3n,) or (steps, 3n); gravity is added
            actuation: Muscle radii, (groups,) or (steps, groups)

        Returns:
            Trajectory: Rollout with per-phase timings
        """
        if steps < 0:
            raise InvalidArgumentError(f"Step count must be non-negative, got {steps}")
        forces = self.expand_forces(f_ext, steps)
        radii = self.expand_actuation(actuation, steps)
        state = self.initial_state(x0, v0)
        initial = state
        timer = PhaseTimer()
        records = []

        start = time.perf_counter()
        for i in range(steps):
            try:
                record = self.step(state, forces[i], None if radii is None else radii[i], timer)
            except NumericalFailureError as e:
                if e.step is None:
                    e.step = i
                logger.error(f"Simulation failed at step {i}: {e}")
                raise
            records.append(record)
            state = record.post
        elapsed = time.perf_counter() - start

        failed = sum(not r.converged for r in records)
        logger.info(
            f"Simulated {steps} steps of '{self.scene.name}' in {elapsed:.3f}s "
            f"({self.config.method.value}, {failed} non-converged)"
        )
        timings = timer.totals()
        timings["forward"] = elapsed
        return Trajectory(
            initial=initial,
            records=records,
            h=self.h,
            config=self.config,
            f_ext=forces,
            actuation=radii,
            timings=timings,
        )


def write_trajectory(trajectory: Trajectory, mesh: HexMesh, out_dir: str | Path) -> Path:
    """Write one snapshot per step plus ``manifest.json``.

    Returns:
        Path: Path of the manifest
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames = []
    for record in trajectory.records:
        index = record.post.step
        path = write_snapshot(frames_dir / f"frame_{index:04d}.txt", mesh, record.post.x)
        frames.append(
            {
                "index": index,
                "file": str(path.relative_to(out_dir)),
                "converged": bool(record.converged),
                "iterations": int(record.iterations),
                "relative_residual": float(record.relative_residual),
                "active_contacts": int(record.active.size),
            }
        )
    manifest = {
        "frame_count": len(frames),
        "h": trajectory.h,
        "solver": trajectory.config.model_dump(mode="json"),
        "frames": frames,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info(f"Wrote {len(frames)} frames to {frames_dir}")
    return manifest_path
