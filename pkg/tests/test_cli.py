"""Tests for the run configuration and the command-line entry point."""

import csv
import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from app.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from src.config.run_config import (
    Command,
    RunConfig,
    config_hash,
    dump_run_config,
    ensure_output_directory,
    load_run_config,
    parse_run_config,
)
from src.utils.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
PARTICLE_RUN = {"command": "simulate", "scene": "particle", "scene_params": {"steps": 3}}


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def run(tmp_path, data, *extra):
    out = tmp_path / "out"
    code = main(["--config", write_config(tmp_path, data), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


class TestRunConfig:
    def test_parse_minimal_run(self):
        config = parse_run_config(PARTICLE_RUN)
        assert config.command is Command.SIMULATE
        assert config.scene_params == {"steps": 3}
        assert config.solver.tolerance > 0.0

    def test_dump_round_trip(self):
        config = parse_run_config({**PARTICLE_RUN, "solver": {"method": "newton_pcg", "tolerance": 1e-6}})
        assert parse_run_config(json.loads(dump_run_config(config))) == config

    def test_config_hash_tracks_content(self):
        config = parse_run_config(PARTICLE_RUN)
        assert config_hash(config) == config_hash(parse_run_config(PARTICLE_RUN))
        assert config_hash(config) != config_hash(config.with_overrides(seed=7))

    @pytest.mark.parametrize(
        "data",
        [
            {**PARTICLE_RUN, "colour": "red"},
            {**PARTICLE_RUN, "solver": {"tolerance": 2.0}},
            {**PARTICLE_RUN, "solver": {"method": "jacobi"}},
            {**PARTICLE_RUN, "scene": "teapot"},
            {"command": "simulate"},
            {"command": "optimize", "scene": "particle"},
            {**PARTICLE_RUN, "command": "gradcheck", "gradcheck": {"components": ["mass"]}},
            {**PARTICLE_RUN, "command": "benchmark", "benchmark": {"tolerances": [0.0]}},
            {**PARTICLE_RUN, "threads": 0},
        ],
    )
    def test_invalid_documents_rejected(self, data):
        with pytest.raises(ConfigError):
            parse_run_config(data)

    def test_overrides_are_validated(self):
        config = parse_run_config(PARTICLE_RUN)
        updated = config.with_overrides(threads=4, tolerance=1e-7, output_directory="elsewhere")
        assert updated.threads == 4
        assert updated.solver.tolerance == 1e-7
        assert updated.solver_config().threads == 4
        assert updated.output_directory == "elsewhere"
        with pytest.raises(ConfigError):
            config.with_overrides(tolerance=1.5)

    def test_task_spec_takes_run_seed_and_threads(self):
        config = parse_run_config(
            {"command": "optimize", "task": {"scene": "particle", "variables": "initial_state"}, "seed": 5}
        ).with_overrides(threads=2, tolerance=1e-6)
        spec = config.task_spec()
        assert spec.seed == 5
        assert spec.solver.threads == 2
        assert spec.solver.tolerance == 1e-6

    def test_task_spec_needs_task(self):
        with pytest.raises(ConfigError):
            parse_run_config(PARTICLE_RUN).task_spec()

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(broken)
        listing = tmp_path / "list.json"
        listing.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(listing)

    def test_output_directory_must_be_writable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("", encoding="utf-8")
        with pytest.raises(ConfigError):
            ensure_output_directory(blocker / "sub")
        assert ensure_output_directory(tmp_path / "a" / "b").is_dir()

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_shipped_configs_are_valid(self, path):
        config = load_run_config(path)
        assert config.output_directory.startswith("./output/")

    def test_run_config_is_frozen(self):
        config = parse_run_config(PARTICLE_RUN)
        assert isinstance(config, RunConfig)
        with pytest.raises(ValidationError):
            config.seed = 3


class TestSimulateCommand:
    def test_writes_frames_manifest_and_timings(self, tmp_path):
        code, out = run(tmp_path, PARTICLE_RUN)
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["frame_count"] == 3
        assert sorted(p.name for p in (out / "frames").iterdir()) == [f"frame_{k:04d}.txt" for k in (1, 2, 3)]
        phases = [row[0] for row in read_csv(out / "timing.csv")[1:]]
        assert "forward" in phases
        metadata = json.loads((out / "run_metadata.json").read_text(encoding="utf-8"))
        assert metadata["command"] == "simulate"
        assert len(metadata["config_sha256"]) == 64
        assert "numpy" in metadata["build"]
        assert "Running simulate" in (out / "run.log").read_text(encoding="utf-8")

    def test_zero_steps_write_manifest_only(self, tmp_path):
        code, out = run(tmp_path, {**PARTICLE_RUN, "scene_params": {"steps": 0}})
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["frame_count"] == 0
        assert not (out / "frames").exists()

    def test_command_line_overrides_recorded(self, tmp_path):
        code, out = run(tmp_path, PARTICLE_RUN, "--seed", "11", "--tol", "1e-6", "--threads", "2")
        assert code == EXIT_OK
        metadata = json.loads((out / "run_metadata.json").read_text(encoding="utf-8"))
        assert metadata["seed"] == 11
        assert metadata["threads"] == 2
        assert metadata["config"]["solver"]["tolerance"] == 1e-6

    @pytest.mark.parametrize(
        "data",
        [
            {**PARTICLE_RUN, "unknown": 1},
            {**PARTICLE_RUN, "scene_params": {"wingspan": 3.0}},
            {**PARTICLE_RUN, "scene_params": {"resolution": 0}},
        ],
    )
    def test_invalid_configuration_exit_code(self, tmp_path, data):
        code, _ = run(tmp_path, data)
        assert code == EXIT_CONFIG

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_bad_override_exit_code(self, tmp_path):
        code, _ = run(tmp_path, PARTICLE_RUN, "--threads", "0")
        assert code == EXIT_CONFIG


class TestGradcheckCommand:
    GRADCHECK_RUN = {
        "command": "gradcheck",
        "scene": "particle",
        "scene_params": {"steps": 3},
        "gradcheck": {"components": ["x0", "v0", "f_ext"], "max_entries": 4},
    }

    def test_passes_on_particle(self, tmp_path):
        code, out = run(tmp_path, self.GRADCHECK_RUN)
        assert code == EXIT_OK
        rows = read_csv(out / "gradcheck.csv")
        assert rows[0] == ["variable", "analytic", "finite_difference", "rel_error"]
        assert len(rows) == 1 + 3 * 4
        assert max(float(r[3]) for r in rows[1:]) < 1e-4

    def test_corrupted_gradient_fails(self, tmp_path):
        data = {**self.GRADCHECK_RUN, "gradcheck": {**self.GRADCHECK_RUN["gradcheck"], "corrupt": True}}
        code, out = run(tmp_path, data)
        assert code == EXIT_NUMERICAL
        assert (out / "gradcheck.csv").exists()

    def test_sampling_is_seeded(self, tmp_path):
        first_dir = tmp_path / "first"
        second_dir = tmp_path / "second"
        first_dir.mkdir()
        second_dir.mkdir()
        _, first = run(first_dir, self.GRADCHECK_RUN)
        _, second = run(second_dir, self.GRADCHECK_RUN)
        assert [r[0] for r in read_csv(first / "gradcheck.csv")] == [r[0] for r in read_csv(second / "gradcheck.csv")]


class TestBenchmarkCommand:
    def test_one_row_per_cell(self, tmp_path):
        data = {
            **PARTICLE_RUN,
            "command": "benchmark",
            "benchmark": {"tolerances": [1e-3, 1e-5], "methods": ["pd", "newton_cholesky"], "threads": [1]},
        }
        code, out = run(tmp_path, data)
        assert code == EXIT_OK
        rows = read_csv(out / "benchmark.csv")
        assert rows[0] == ["method", "threads", "tolerance", "forward_s", "backward_s", "loss", "grad_norm"]
        assert len(rows) == 5
        losses = {float(r[5]) for r in rows[1:]}
        # The particle rollout is linear, so every cell sees the same loss
        assert max(losses) - min(losses) < 1e-10


class TestOptimizeCommand:
    def test_writes_history_summary_and_rollout(self, tmp_path):
        data = {
            "command": "optimize",
            "task": {
                "scene": "particle",
                "scene_params": {"steps": 3},
                "variables": "initial_state",
                "loss": {"kind": "com_target"},
                "reference": [0.05, 0.0, 0.1, 0.0, 0.0, 0.2],
                "optimizer": {"max_iterations": 5},
                "random_samples": 2,
            },
        }
        code, out = run(tmp_path, data)
        assert code == EXIT_OK
        history = read_csv(out / "loss_history.csv")
        assert history[0] == ["evaluation_index", "loss", "grad_norm", "wall_time_s"]
        summary = json.loads((out / "normalized_loss.json").read_text(encoding="utf-8"))
        assert summary["variables_kind"] == "initial_state"
        assert summary["loss"] <= summary["initial_loss"]
        assert "random_mean" in summary["normalized"]
        assert json.loads((out / "manifest.json").read_text(encoding="utf-8"))["frame_count"] == 3

    def test_task_layout_error_is_config_error(self, tmp_path):
        data = {"command": "optimize", "task": {"scene": "particle", "variables": "sinusoid", "random_samples": 0}}
        code, _ = run(tmp_path, data)
        assert code == EXIT_CONFIG
