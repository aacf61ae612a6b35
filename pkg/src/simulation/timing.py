"""Wall-clock accounting per solver phase."""

import time
from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator, Optional


class PhaseTimer:
    """Accumulates wall-clock seconds per named phase (local, global, contact, adjoint)."""

    def __init__(self) -> None:
        self._totals: Dict[str, float] = defaultdict(float)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self._totals[name] += time.perf_counter() - start

    def totals(self) -> Dict[str, float]:
        return dict(self._totals)


@contextmanager
def timed(timer: Optional[PhaseTimer], name: str) -> Iterator[None]:
    """``timer.phase(name)`` when a timer is given, a no-op otherwise."""
    if timer is None:
        yield
    else:
        with timer.phase(name):
            yield
