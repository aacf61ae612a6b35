"""Command-line entry point for SoftPD.

Usage:
    python -m app.cli --config run.json [--threads k] [--seed s] [--out dir] [--tol t]

Exit codes: 0 success, 1 numerical failure, 2 invalid configuration.
"""

import argparse
import csv
import json
import platform
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np
import scipy

from src import __version__
from src.backprop.gradcheck import GradientCheckRow, gradient_check, max_error, write_gradient_report
from src.backprop.gradients import differentiate
from src.config.run_config import (
    Command,
    RunConfig,
    config_hash,
    dump_run_config,
    ensure_output_directory,
    load_run_config,
)
from src.config.settings import settings
from src.energy.materials import MaterialParams
from src.simulation.simulator import Simulator, write_trajectory
from src.simulation.state import SolverConfig, SolverMethod
from src.tasks.losses import LossSpec, evaluate_loss
from src.tasks.scenes import SceneSetup, build_scene
from src.tasks.task import Task, TaskResult, run_task
from src.utils.errors import ConfigError, InvalidArgumentError, NumericalFailureError
from src.utils.logging import attach_run_log, detach_run_log, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2

BENCHMARK_COLUMNS = ("method", "threads", "tolerance", "forward_s", "backward_s", "loss", "grad_norm")
TIMING_COLUMNS = ("phase", "seconds")
WORST_OFFENDERS = 5


def build_identifier() -> str:
    return (
        f"{settings.app_name.lower()}-{__version__} python-{platform.python_version()} "
        f"numpy-{np.__version__} scipy-{scipy.__version__}"
    )


def write_run_metadata(config: RunConfig, out_dir: Path) -> Path:
    metadata = {
        "command": config.command.value,
        "config_sha256": config_hash(config),
        "seed": config.seed,
        "threads": config.threads,
        "build": build_identifier(),
        "started_at": datetime.now(timezone.utc).isoformat(),
        "config": json.loads(dump_run_config(config)),
    }
    path = out_dir / "run_metadata.json"
    path.write_text(json.dumps(metadata, indent=2), encoding="utf-8")
    return path


def write_timing_csv(timings: Dict[str, float], path: Path) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_COLUMNS)
        for phase in sorted(timings):
            writer.writerow([phase, f"{timings[phase]:.6f}"])
    return path


def _scene_setup(config: RunConfig) -> SceneSetup:
    try:
        return build_scene(config.scene, **config.scene_params)
    except InvalidArgumentError as e:
        raise ConfigError(str(e)) from e


def _seeded_loss(spec: LossSpec, seed: int) -> LossSpec:
    return spec.model_copy(update={"seed": seed})


def _out_dir(config: RunConfig) -> Path:
    return ensure_output_directory(config.output_directory)


def cmd_simulate(config: RunConfig) -> int:
    """Forward simulation with per-frame snapshots, a manifest and a timing summary."""
    out_dir = _out_dir(config)
    setup = _scene_setup(config)
    simulator = setup.simulator(config.solver_config())
    trajectory = simulator.simulate(setup.x0, setup.v0, setup.steps, setup.f_ext, setup.actuation)
    write_trajectory(trajectory, setup.scene.mesh, out_dir)
    write_timing_csv(trajectory.timings, out_dir / "timing.csv")

    failed = [r.post.step for r in trajectory.records if not r.converged]
    if failed:
        logger.warning(f"{len(failed)} of {trajectory.steps} frames did not converge: {failed}")
        return EXIT_NUMERICAL
    return EXIT_OK


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    threads: int
    tolerance: float
    forward_s: float
    backward_s: float
    loss: float
    grad_norm: float


def _warm_up(simulator: Simulator, setup: SceneSetup) -> None:
    """One untimed step so first-touch costs stay out of the timings."""
    if setup.steps == 0:
        return
    forces = simulator.expand_forces(setup.f_ext, setup.steps)
    radii = simulator.expand_actuation(setup.actuation, setup.steps)
    state = simulator.initial_state(setup.x0, setup.v0)
    simulator.step(state, forces[0], None if radii is None else radii[0])


def benchmark_cell(
    setup: SceneSetup, solver: SolverConfig, loss: LossSpec, method: SolverMethod, threads: int, tolerance: float
) -> BenchmarkRow:
    """Time one forward + backward pass; numerical failures give a NaN row."""
    config = solver.model_copy(update={"method": method, "tolerance": tolerance, "threads": threads})
    try:
        simulator = setup.simulator(config)
        _warm_up(simulator, setup)
        trajectory = simulator.simulate(setup.x0, setup.v0, setup.steps, setup.f_ext, setup.actuation)
        value, loss_grad = evaluate_loss(loss, simulator.scene, trajectory)
        bundle = differentiate(simulator, trajectory, loss_grad)
    except NumericalFailureError as e:
        logger.error(f"Benchmark cell ({method.value}, {threads} threads, tol {tolerance:.0e}) failed: {e}")
        return BenchmarkRow(method.value, threads, tolerance, np.nan, np.nan, np.nan, np.nan)
    if not trajectory.converged:
        logger.warning(f"Benchmark cell ({method.value}, tol {tolerance:.0e}) has non-converged frames")
    return BenchmarkRow(
        method.value,
        threads,
        tolerance,
        trajectory.timings["forward"],
        bundle.timings["backward"],
        value,
        bundle.norm(),
    )


def write_benchmark_csv(rows: Sequence[BenchmarkRow], path: Path) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCHMARK_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.method,
                    r.threads,
                    f"{r.tolerance:.1e}",
                    f"{r.forward_s:.6f}",
                    f"{r.backward_s:.6f}",
                    f"{r.loss:.12g}",
                    f"{r.grad_norm:.12g}",
                ]
            )
    return path


def cmd_benchmark(config: RunConfig) -> int:
    """Sweep tolerance x method x thread count; one CSV row per cell."""
    out_dir = _out_dir(config)
    setup = _scene_setup(config)
    grid = config.benchmark
    loss = _seeded_loss(grid.loss, config.seed)
    rows: List[BenchmarkRow] = []
    for tolerance in grid.tolerances:
        for method in grid.methods:
            for threads in grid.threads:
                rows.append(benchmark_cell(setup, config.solver, loss, method, threads, tolerance))
    write_benchmark_csv(rows, out_dir / "benchmark.csv")

    failed = sum(np.isnan(r.loss) for r in rows)
    logger.info(f"Benchmark finished: {len(rows)} cells, {failed} failed")
    return EXIT_NUMERICAL if failed else EXIT_OK


@dataclass(frozen=True)
class RolloutInputs:
    x0: np.ndarray
    v0: np.ndarray
    forces: np.ndarray
    radii: Optional[np.ndarray]
    material: MaterialParams


def _rollout_loss(simulator: Simulator, setup: SceneSetup, loss: LossSpec, inputs: RolloutInputs):
    simulator.set_scene(setup.scene.with_material(inputs.material))
    trajectory = simulator.simulate(inputs.x0, inputs.v0, setup.steps, inputs.forces, inputs.radii)
    value, loss_grad = evaluate_loss(loss, simulator.scene, trajectory)
    return value, loss_grad, trajectory


def _perturbed(inputs: RolloutInputs, component: str, values: np.ndarray) -> RolloutInputs:
    if component == "x0":
        return replace(inputs, x0=values)
    if component == "v0":
        return replace(inputs, v0=values)
    if component == "f_ext":
        return replace(inputs, forces=values.reshape(inputs.forces.shape))
    if component == "actuation":
        return replace(inputs, radii=values.reshape(inputs.radii.shape))
    if component == "youngs_modulus":
        return replace(inputs, material=inputs.material.model_copy(update={"youngs_modulus": float(values[0])}))
    return replace(inputs, material=inputs.material.model_copy(update={"poissons_ratio": float(values[0])}))


def _base_values(inputs: RolloutInputs, component: str) -> np.ndarray:
    if component == "f_ext":
        return inputs.forces.ravel()
    if component == "actuation":
        return inputs.radii.ravel()
    if component == "youngs_modulus":
        return np.array([inputs.material.youngs_modulus])
    if component == "poissons_ratio":
        return np.array([inputs.material.poissons_ratio])
    return getattr(inputs, component)


def _sample_indices(setup: SceneSetup, component: str, size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Entries to check: free DoFs for state and force components, any entry otherwise."""
    if component in ("x0", "v0", "f_ext"):
        free = np.flatnonzero(setup.scene.mesh.free_mask())
        per_step = size // setup.scene.mesh.num_dofs
        candidates = (np.arange(per_step)[:, None] * setup.scene.mesh.num_dofs + free[None, :]).ravel()
    else:
        candidates = np.arange(size)
    if candidates.size <= count:
        return candidates
    return np.sort(rng.choice(candidates, size=count, replace=False))


def run_gradcheck(config: RunConfig, setup: SceneSetup) -> List[GradientCheckRow]:
    """Central-difference check of every configured gradient component."""
    spec = config.gradcheck
    loss = _seeded_loss(spec.loss, config.seed)
    simulator = setup.simulator(config.solver_config())
    initial = simulator.initial_state(setup.x0, setup.v0)
    base = RolloutInputs(
        x0=initial.x,
        v0=initial.v,
        forces=simulator.expand_forces(setup.f_ext, setup.steps),
        radii=simulator.expand_actuation(setup.actuation, setup.steps),
        material=setup.scene.material,
    )
    if base.radii is None and setup.num_groups:
        base = replace(base, radii=np.ones((setup.steps, setup.num_groups)))

    _, loss_grad, trajectory = _rollout_loss(simulator, setup, loss, base)
    bundle = differentiate(simulator, trajectory, loss_grad)
    rng = np.random.default_rng(config.seed)

    rows: List[GradientCheckRow] = []
    for component in spec.components:
        if component == "actuation" and base.radii is None:
            logger.info(f"Scene '{setup.name}' has no muscles; skipping actuation gradients")
            continue
        x = np.array(_base_values(base, component), dtype=float)
        analytic = bundle.component(component).ravel().copy()
        if spec.corrupt:
            analytic *= 1.1
        indices = _sample_indices(setup, component, x.shape[0], spec.max_entries, rng)

        def func(values: np.ndarray, component: str = component) -> float:
            return _rollout_loss(simulator, setup, loss, _perturbed(base, component, values))[0]

        names = [f"{component}[{j}]" for j in range(x.shape[0])]
        rows.extend(gradient_check(func, x, analytic, names, spec.eps, indices, spec.floor))
    simulator.set_scene(setup.scene)
    return rows


def cmd_gradcheck(config: RunConfig) -> int:
    """Compare analytic gradients against finite differences; fail above the tolerance."""
    out_dir = _out_dir(config)
    setup = _scene_setup(config)
    rows = run_gradcheck(config, setup)
    write_gradient_report(rows, out_dir / "gradcheck.csv")

    tolerance = config.gradcheck.tolerance
    worst = sorted(rows, key=lambda r: r.rel_error, reverse=True)
    if max_error(rows) > tolerance:
        offenders = ", ".join(f"{r.variable} ({r.rel_error:.2e})" for r in worst[:WORST_OFFENDERS])
        logger.error(f"Gradient check failed at tolerance {tolerance:.1e}; worst: {offenders}")
        return EXIT_NUMERICAL
    logger.info(f"Gradient check passed at tolerance {tolerance:.1e} ({len(rows)} entries)")
    return EXIT_OK


def _optimize_summary(result: TaskResult, task: Task) -> Dict[str, Any]:
    material = None
    if result.material is not None:
        material = result.material.model_dump()
    return {
        "scene": task.spec.scene,
        "variables_kind": task.spec.variables.value,
        "variables": np.asarray(result.variables).tolist(),
        "loss": result.loss,
        "initial_loss": result.initial_loss,
        "iterations": result.optimize.iterations,
        "evaluations": len(result.optimize.history),
        "success": result.optimize.success,
        "message": result.optimize.message,
        "material": material,
        "normalized": result.normalized,
    }


def cmd_optimize(config: RunConfig) -> int:
    """Run the configured task; writes the loss history, the summary and the final rollout."""
    out_dir = _out_dir(config)
    try:
        task = Task(config.task_spec())
    except InvalidArgumentError as e:
        raise ConfigError(str(e)) from e
    result = run_task(task)
    result.optimize.history.write_csv(out_dir / "loss_history.csv")
    summary = _optimize_summary(result, task)
    (out_dir / "normalized_loss.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    write_trajectory(result.trajectory, task.simulator.scene.mesh, out_dir)
    if not result.trajectory.converged:
        logger.warning("Final rollout has non-converged frames")
    logger.info(f"Optimization finished: loss {result.initial_loss:.6e} -> {result.loss:.6e}")
    return EXIT_OK


COMMANDS: Dict[Command, Callable[[RunConfig], int]] = {
    Command.SIMULATE: cmd_simulate,
    Command.BENCHMARK: cmd_benchmark,
    Command.GRADCHECK: cmd_gradcheck,
    Command.OPTIMIZE: cmd_optimize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softpd", description="Differentiable soft-body simulation runs")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--threads", type=int, help="Worker threads (overrides the config)")
    parser.add_argument("--seed", type=int, help="Random seed (overrides the config)")
    parser.add_argument("--out", help="Output directory (overrides the config)")
    parser.add_argument("--tol", type=float, help="Solver tolerance (overrides the config)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config).with_overrides(
            threads=args.threads, seed=args.seed, output_directory=args.out, tolerance=args.tol
        )
        out_dir = ensure_output_directory(config.output_directory)
    except (ConfigError, InvalidArgumentError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    run_log = attach_run_log(out_dir)
    try:
        write_run_metadata(config, out_dir)
        logger.info(f"Running {config.command.value} ({build_identifier()})")
        return COMMANDS[config.command](config)
    except (ConfigError, InvalidArgumentError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except NumericalFailureError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    finally:
        detach_run_log(run_log)


if __name__ == "__main__":
    sys.exit(main())
