"""Material parameters and their mapping onto PD stiffness weights."""

from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.utils.errors import InvalidArgumentError

# Above this Poisson's ratio the volume weight overflows in practice
MAX_POISSONS_RATIO = 0.499


class MaterialParams(BaseModel):
    """Isotropic linear material parameters.

    Attributes:
        youngs_modulus: Young's modulus E in Pa
        poissons_ratio: Poisson's ratio, exclusive range (-1, 0.5)
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    youngs_modulus: float = Field(gt=0.0)
    poissons_ratio: float = Field(gt=-1.0, lt=0.5)


def _check(params: MaterialParams) -> Tuple[float, float]:
    E, nu = params.youngs_modulus, params.poissons_ratio
    if nu > MAX_POISSONS_RATIO:
        raise InvalidArgumentError(
            f"Poisson's ratio {nu} exceeds {MAX_POISSONS_RATIO}; volume weight overflows"
        )
    return E, nu


def lame_parameters(params: MaterialParams) -> Tuple[float, float]:
    """Return (mu, lambda) for the given material."""
    E, nu = _check(params)
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def lame_weights(params: MaterialParams) -> Tuple[float, float]:
    """Map (E, nu) to PD stiffness weights.

    Args:
        params: Material parameters

    Returns:
        Tuple[float, float]: (w_corotated, w_volume) = (2 mu, lambda)

    Raises:
        InvalidArgumentError: If nu exceeds 0.499

    Example:
        >>> lame_weights(MaterialParams(youngs_modulus=1.0, poissons_ratio=0.0))
        (1.0, 0.0)
    """
    mu, lam = lame_parameters(params)
    return 2.0 * mu, lam


def lame_weight_derivatives(params: MaterialParams) -> np.ndarray:
    """Jacobian of (w_corotated, w_volume) with respect to (E, nu).

    Returns:
        np.ndarray: 2x2 array, row = weight, column = parameter
    """
    E, nu = _check(params)
    denom = (1.0 + nu) * (1.0 - 2.0 * nu)
    return np.array(
        [
            [1.0 / (1.0 + nu), -E / (1.0 + nu) ** 2],
            [nu / denom, E * (1.0 + 2.0 * nu**2) / denom**2],
        ]
    )
