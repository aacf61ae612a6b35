"""Configuration settings for the SoftPD simulator.

This module defines all application settings using Pydantic for validation.
Settings are loaded from environment variables using python-dotenv.
"""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables.

    All settings can be configured via .env file or environment variables.
    See .env.example for available options.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    # Solver Defaults
    solver_tolerance: float = Field(
        default=1e-4,
        description="Relative residual threshold for forward and adjoint solves",
        gt=0.0,
        lt=1.0
    )
    solver_max_iterations: int = Field(
        default=500,
        description="Maximum global-local (or Newton) iterations per time step",
        ge=1
    )
    contact_max_outer_iterations: int = Field(
        default=10,
        description="Maximum predictor-corrector iterations per contact step",
        ge=1
    )
    bfgs_history: int = Field(
        default=10,
        description="Number of curvature pairs kept by the quasi-Newton solvers",
        ge=1,
        le=100
    )

    # Parallelism
    worker_threads: int = Field(
        default=1,
        description="Threads used for per-element local steps",
        ge=1,
        le=256
    )

    # Scene Defaults
    timestep_contact_free: float = Field(
        default=0.01,
        description="Default time step (s) for scenes without contact",
        gt=0.0
    )
    timestep_contact: float = Field(
        default=0.005,
        description="Default time step (s) for contact scenes",
        gt=0.0
    )
    gravity: float = Field(
        default=9.81,
        description="Gravitational acceleration magnitude (m/s^2)",
        ge=0.0
    )

    # Output Settings
    output_directory: str = Field(
        default="./output",
        description="Directory for trajectory dumps and CSV reports"
    )
    default_seed: int = Field(
        default=0,
        description="Seed used when a run does not provide one",
        ge=0
    )

    # Application Settings
    app_name: str = Field(
        default="SoftPD",
        description="Application name"
    )
    debug: bool = Field(
        default=False,
        description="Enable debug mode"
    )
    log_file: str | None = Field(
        default=None,
        description="Optional log file path"
    )


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get the global settings instance.

    Returns:
        Settings: The application settings
    """
    return settings
