"""Gradient-based optimizers with a recorded loss history."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from src.utils.errors import InvalidArgumentError
from src.utils.logging import get_logger

logger = get_logger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Bounds = Optional[Sequence[Tuple[Optional[float], Optional[float]]]]

HISTORY_COLUMNS = ("evaluation_index", "loss", "grad_norm", "wall_time_s")


@dataclass(frozen=True)
class HistoryEntry:
    evaluation_index: int
    loss: float
    grad_norm: float
    wall_time_s: float


@dataclass
class LossHistory:
    """Every objective evaluation plus the best iterate seen so far."""

    entries: List[HistoryEntry] = field(default_factory=list)
    best_x: Optional[np.ndarray] = None
    best_loss: float = np.inf
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, x: np.ndarray, loss: float, grad: np.ndarray) -> None:
        entry = HistoryEntry(
            evaluation_index=len(self.entries),
            loss=float(loss),
            grad_norm=float(np.linalg.norm(grad)),
            wall_time_s=time.perf_counter() - self._start,
        )
        self.entries.append(entry)
        if np.isfinite(loss) and loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_x = np.array(x, dtype=float)

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.entries])

    def best_so_far(self) -> np.ndarray:
        """Running minimum of the recorded losses."""
        losses = self.losses
        return np.minimum.accumulate(losses) if losses.size else losses

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for e in self.entries:
                writer.writerow([e.evaluation_index, f"{e.loss:.12g}", f"{e.grad_norm:.6g}", f"{e.wall_time_s:.6f}"])
        return path


@dataclass
class OptimizeResult:
    x: np.ndarray
    loss: float
    history: LossHistory
    iterations: int
    success: bool
    message: str


def _recording(fun: Objective, history: LossHistory) -> Objective:
    def wrapped(x: np.ndarray) -> Tuple[float, np.ndarray]:
        loss, grad = fun(np.array(x, dtype=float))
        grad = np.asarray(grad, dtype=float)
        history.record(x, loss, grad)
        logger.debug(f"Evaluation {len(history)}: loss={loss:.6e}, |grad|={np.linalg.norm(grad):.3e}")
        return float(loss), grad

    return wrapped


def _clip(x: np.ndarray, bounds: Bounds) -> np.ndarray:
    if bounds is None:
        return x
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    if np.any(lo > hi):
        raise InvalidArgumentError("Every lower bound must not exceed its upper bound")
    return np.clip(x, lo, hi)


def lbfgs(
    fun: Objective,
    x0: np.ndarray,
    bounds: Bounds = None,
    max_iterations: int = 100,
    gtol: float = 1e-8,
    ftol: float = 1e-12,
    history_size: int = 10,
) -> OptimizeResult:
    """Bounded L-BFGS (scipy L-BFGS-B) returning the best iterate seen.

    Args:
        fun: Returns (loss, gradient)
        x0: Initial point (clipped into the bounds)
        bounds: (lo, hi) per variable, None for unbounded sides
        max_iterations: Iteration cap; 0 evaluates x0 only
        gtol: Projected-gradient tolerance
        ftol: Relative loss-decrease tolerance
        history_size: Curvature pairs kept

    Returns:
        OptimizeResult: Best point and the full evaluation history
    """
    x0 = _clip(np.array(x0, dtype=float), bounds)
    if bounds is not None and len(bounds) != x0.shape[0]:
        raise InvalidArgumentError("Need one bound pair per variable")
    history = LossHistory()
    objective = _recording(fun, history)

    if max_iterations <= 0:
        loss, _ = objective(x0)
        return OptimizeResult(x0, loss, history, 0, True, "No iterations requested")

    result = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iterations, "maxcor": history_size, "gtol": gtol, "ftol": ftol},
    )
    x, loss = np.asarray(result.x, dtype=float), float(result.fun)
    if history.best_x is not None and history.best_loss < loss:
        x, loss = history.best_x, history.best_loss
    logger.info(
        f"L-BFGS finished after {result.nit} iterations and {len(history)} evaluations: "
        f"loss={loss:.6e} ({result.message})"
    )
    return OptimizeResult(x, loss, history, int(result.nit), bool(result.success), str(result.message))


def adam(
    fun: Objective,
    x0: np.ndarray,
    step_size: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    iterations: int = 100,
    bounds: Bounds = None,
) -> OptimizeResult:
    """Adam with optional projection onto box bounds."""
    if not step_size > 0:
        raise InvalidArgumentError(f"Adam step size must be positive, got {step_size}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise InvalidArgumentError("Adam decay rates must lie in [0, 1)")
    history = LossHistory()
    objective = _recording(fun, history)
    x = _clip(np.array(x0, dtype=float), bounds)
    m = np.zeros_like(x)
    v = np.zeros_like(x)

    for t in range(1, iterations + 1):
        _, g = objective(x)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        x = _clip(x - step_size * m_hat / (np.sqrt(v_hat) + eps), bounds)

    loss, _ = objective(x)
    if history.best_x is None:
        logger.warning(f"Adam recorded no finite loss in {iterations} iterations")
        return OptimizeResult(x, float(loss), history, iterations, False, "No finite loss recorded")
    logger.info(f"Adam finished after {iterations} iterations: best loss={history.best_loss:.6e}")
    return OptimizeResult(history.best_x, history.best_loss, history, iterations, True, f"Final loss {loss:.6e}")
