"""Chunked thread-pool evaluation of per-element kernels.

Numpy releases the GIL inside batched linear algebra (SVDs, small solves),
so contiguous element chunks evaluated on a thread pool run in parallel.
Results are concatenated in chunk order, which keeps outputs bit-identical
for any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence

import numpy as np

# Below this many blocks the pool overhead dominates
MIN_BLOCKS_PER_CHUNK = 512


def chunk_slices(count: int, threads: int) -> List[slice]:
    """Split ``range(count)`` into at most ``threads`` contiguous slices.

    Args:
        count: Number of items
        threads: Maximum number of chunks

    Returns:
        List[slice]: Non-empty slices covering the range in order
    """
    if count <= 0:
        return []
    chunks = max(1, min(threads, count // MIN_BLOCKS_PER_CHUNK))
    bounds = np.linspace(0, count, chunks + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def chunked_map(
    fn: Callable[[slice], Sequence[np.ndarray] | np.ndarray],
    count: int,
    threads: int = 1,
):
    """Evaluate ``fn`` over contiguous chunks and concatenate along axis 0.

    Args:
        fn: Kernel taking a slice and returning an array or a tuple of arrays
        count: Number of blocks
        threads: Maximum worker threads

    Returns:
        The concatenated array (or tuple of arrays) for the full range

    Example:
        >>> rotations = chunked_map(lambda s: project(F[s]), len(F), threads=4)
    """
    slices = chunk_slices(count, threads)
    if len(slices) <= 1:
        return fn(slice(0, count))

    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        parts = list(pool.map(fn, slices))

    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(items, axis=0) for items in zip(*parts))
    return np.concatenate(parts, axis=0)
