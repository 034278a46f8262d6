"""Deterministic chunked Monte Carlo fan-out.

Chunk ``j`` of an ensemble draws from ``rs.shifted(j)`` and results are
reduced in chunk order, so an estimate depends only on ``(seed, stream,
chunk_size)`` and never on how many worker threads ran the chunks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from exlab.path_core import RandomSource

DEFAULT_CHUNK = 4096


def chunk_sizes(n: int, chunk_size: int = DEFAULT_CHUNK) -> list[int]:
    if n < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n}")
    full, rest = divmod(n, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def map_chunks(
    fn: Callable[[RandomSource, int], tuple],
    n: int,
    rs: RandomSource,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> tuple:
    """Evaluate ``fn(rs.shifted(j), m_j)`` over an ensemble of total size ``n``.

    ``fn`` returns a tuple of 1-d arrays of length ``m_j`` (per-sample
    statistics); the tuples are concatenated component-wise in chunk order.
    """
    sizes = chunk_sizes(n, chunk_size)
    if threads <= 1:
        parts = [fn(rs.shifted(j), m) for j, m in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda jm: fn(rs.shifted(jm[0]), jm[1]),
                                   enumerate(sizes)))
    return tuple(np.concatenate(comp) for comp in zip(*parts))


def mean_and_se(x: Sequence[float]) -> tuple[float, float]:
    """Sample mean and its standard error."""
    x = np.asarray(x, dtype=float)
    n = x.size
    m = float(np.mean(x))
    if n < 2:
        return m, float("inf")
    return m, float(np.std(x, ddof=1) / np.sqrt(n))
