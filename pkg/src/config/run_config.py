"""Run-level configuration ingested by the command-line entry point.

A run is described by one JSON document validated into RunConfig. Unknown
keys anywhere in the document are rejected.

Example:
    {
        "command": "simulate",
        "scene": "cantilever",
        "scene_params": {"resolution": 1, "steps": 25},
        "solver": {"method": "pd", "tolerance": 1e-4}
    }
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config.settings import settings
from src.simulation.state import SolverConfig, SolverMethod
from src.tasks.losses import LossSpec
from src.tasks.scenes import SCENE_CATALOG
from src.tasks.task import TaskSpec
from src.utils.errors import ConfigError
from src.utils.logging import get_logger

logger = get_logger(__name__)

GRADCHECK_COMPONENTS = ("x0", "v0", "f_ext", "youngs_modulus", "poissons_ratio", "actuation")


class Command(str, Enum):
    SIMULATE = "simulate"
    BENCHMARK = "benchmark"
    GRADCHECK = "gradcheck"
    OPTIMIZE = "optimize"


class BenchmarkSpec(BaseModel):
    """Sweep grid of the benchmark command: tolerances x methods x thread counts."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tolerances: List[float] = Field(default_factory=lambda: [10.0**-k for k in range(1, 8)], min_length=1)
    methods: List[SolverMethod] = Field(default_factory=lambda: list(SolverMethod), min_length=1)
    threads: List[int] = Field(default_factory=lambda: [2, 4, 8], min_length=1)
    loss: LossSpec = Field(default_factory=LossSpec)

    @model_validator(mode="after")
    def _check_grid(self) -> "BenchmarkSpec":
        if any(not 0.0 < t < 1.0 for t in self.tolerances):
            raise ValueError("Benchmark tolerances must lie in (0, 1)")
        if any(k < 1 for k in self.threads):
            raise ValueError("Benchmark thread counts must be at least 1")
        return self


class GradcheckSpec(BaseModel):
    """Finite-difference check settings.

    Attributes:
        components: Gradient components to check
        eps: Relative finite-difference step
        tolerance: Largest accepted relative error
        max_entries: Entries sampled per vector component
        floor: Relative floor below which components count as zero
        loss: Loss whose gradient is checked
        corrupt: Scale the analytic gradient by 1.1 before comparing (negative control)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    components: List[str] = Field(default_factory=lambda: list(GRADCHECK_COMPONENTS), min_length=1)
    eps: float = Field(default=1e-6, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    max_entries: int = Field(default=8, ge=1)
    floor: float = Field(default=1e-8, ge=0.0)
    loss: LossSpec = Field(default_factory=LossSpec)
    corrupt: bool = False

    @model_validator(mode="after")
    def _check_components(self) -> "GradcheckSpec":
        unknown = set(self.components) - set(GRADCHECK_COMPONENTS)
        if unknown:
            raise ValueError(f"Unknown gradient components {sorted(unknown)}, expected {GRADCHECK_COMPONENTS}")
        return self


class RunConfig(BaseModel):
    """One command-line run.

    The optimize command reads its scene and solver from ``task``; every
    other command needs ``scene``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    scene: Optional[str] = None
    scene_params: Dict[str, Any] = Field(default_factory=dict)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    threads: int = Field(default_factory=lambda: settings.worker_threads, ge=1)
    output_directory: str = Field(default_factory=lambda: settings.output_directory)
    seed: int = Field(default_factory=lambda: settings.default_seed, ge=0)
    benchmark: BenchmarkSpec = Field(default_factory=BenchmarkSpec)
    gradcheck: GradcheckSpec = Field(default_factory=GradcheckSpec)
    task: Optional[TaskSpec] = None

    @model_validator(mode="after")
    def _check_scene(self) -> "RunConfig":
        if self.command is Command.OPTIMIZE:
            if self.task is None:
                raise ValueError("The optimize command needs a task section")
            scenes = [self.task.scene]
        else:
            if self.scene is None:
                raise ValueError(f"The {self.command.value} command needs a scene")
            scenes = [self.scene]
        for name in scenes:
            if name not in SCENE_CATALOG:
                raise ValueError(f"Unknown scene '{name}', expected one of {sorted(SCENE_CATALOG)}")
        return self

    def with_overrides(
        self,
        threads: Optional[int] = None,
        seed: Optional[int] = None,
        output_directory: Optional[str] = None,
        tolerance: Optional[float] = None,
    ) -> "RunConfig":
        """Apply command-line overrides; the result is validated again.

        Raises:
            ConfigError: If an override is out of range
        """
        data = self.model_dump(mode="json")
        if threads is not None:
            data["threads"] = threads
        if seed is not None:
            data["seed"] = seed
        if output_directory is not None:
            data["output_directory"] = output_directory
        if tolerance is not None:
            data["solver"]["tolerance"] = tolerance
            if data.get("task") is not None:
                data["task"]["solver"]["tolerance"] = tolerance
        return parse_run_config(data)

    def solver_config(self) -> SolverConfig:
        """Solver settings with the run's thread count."""
        return self.solver.model_copy(update={"threads": self.threads})

    def task_spec(self) -> TaskSpec:
        """Task with the run's thread count and seed applied."""
        if self.task is None:
            raise ConfigError("Run has no task section")
        solver = self.task.solver.model_copy(update={"threads": self.threads})
        return self.task.model_copy(update={"solver": solver, "seed": self.seed})


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a decoded JSON document.

    Raises:
        ConfigError: If the document does not describe a valid run
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e


def load_run_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises:
        ConfigError: If the file is missing, not JSON or not a valid run
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration {path} must be a JSON object")
    config = parse_run_config(data)
    logger.info(f"Loaded {config.command.value} configuration from {path}")
    return config


def dump_run_config(config: RunConfig) -> str:
    """Canonical JSON text of ``config`` (sorted keys)."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(config).encode("utf-8")).hexdigest()


def ensure_output_directory(path: str | Path) -> Path:
    """Create ``path`` and check that it is writable.

    Raises:
        ConfigError: If the directory cannot be created or written
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"Output directory {path} is not writable: {e}") from e
    return path
