"""Central finite-difference checks of analytic gradients."""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

REPORT_COLUMNS = ("variable", "analytic", "finite_difference", "rel_error")


@dataclass(frozen=True)
class GradientCheckRow:
    variable: str
    analytic: float
    finite_difference: float
    rel_error: float


def step_sizes(x: np.ndarray, eps: float) -> np.ndarray:
    """Per-variable steps eps * max(1, |x_j|)."""
    return eps * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def finite_difference(
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-6,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of ``func`` at ``x``.

    Args:
        func: Scalar function of a vector
        x: Point of evaluation
        eps: Relative step size (scaled by max(1, |x_j|))
        indices: Entries to differentiate (all when omitted)

    Returns:
        np.ndarray: Gradient estimates, one per requested entry
    """
    if not eps > 0:
        raise InvalidArgumentError(f"Finite-difference step must be positive, got {eps}")
    x0 = np.array(x, dtype=float)
    indices = np.arange(x0.shape[0]) if indices is None else np.asarray(indices, dtype=np.int64)
    steps = step_sizes(x0, eps)
    logger.info(f"Finite differences over {indices.shape[0]} variables (eps={eps:.1e})")

    grad = np.zeros(indices.shape[0])
    for k, j in enumerate(indices):
        x = x0.copy()
        x[j] = x0[j] + steps[j]
        f_plus = func(x)
        x[j] = x0[j] - steps[j]
        f_minus = func(x)
        grad[k] = (f_plus - f_minus) / (2.0 * steps[j])
    return grad


def relative_error(analytic: np.ndarray, estimate: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """|a - fd| / max(|a|, |fd|, floor), zero where both are below ``floor``."""
    analytic = np.asarray(analytic, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(estimate)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.abs(analytic - estimate) / scale
    return np.where(scale > 0.0, err, 0.0)


def gradient_check(
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    names: Optional[Sequence[str]] = None,
    eps: float = 1e-6,
    indices: Optional[Sequence[int]] = None,
    floor: float = 1e-8,
) -> List[GradientCheckRow]:
    """Compare an analytic gradient against central differences.

    Components whose magnitude is below ``floor`` times the analytic norm are
    compared against that floor instead of their own size.
    """
    analytic = np.asarray(analytic, dtype=float)
    if analytic.shape != np.shape(x):
        raise InvalidArgumentError("Analytic gradient does not match the variable vector")
    indices = np.arange(analytic.shape[0]) if indices is None else np.asarray(indices, dtype=np.int64)
    names = list(names) if names is not None else [f"x[{i}]" for i in range(analytic.shape[0])]
    if len(names) != analytic.shape[0]:
        raise InvalidArgumentError("Need one name per gradient entry")

    estimate = finite_difference(func, x, eps, indices)
    floor_abs = floor * max(float(np.linalg.norm(analytic)), float(np.linalg.norm(estimate)))
    errors = relative_error(analytic[indices], estimate, floor_abs)
    rows = [
        GradientCheckRow(names[j], float(analytic[j]), float(fd), float(err))
        for j, fd, err in zip(indices, estimate, errors)
    ]
    logger.info(f"Gradient check: max relative error {max_error(rows):.3e} over {len(rows)} variables")
    return rows


def max_error(rows: Sequence[GradientCheckRow]) -> float:
    return max((row.rel_error for row in rows), default=0.0)


def write_gradient_report(rows: Sequence[GradientCheckRow], path: str | Path) -> Path:
    """Write the check as CSV with columns variable, analytic, finite_difference, rel_error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row.variable, f"{row.analytic:.12g}", f"{row.finite_difference:.12g}", f"{row.rel_error:.6g}"])
    logger.info(f"Wrote gradient report with {len(rows)} rows to {path}")
    return path
