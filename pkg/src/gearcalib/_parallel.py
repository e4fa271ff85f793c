"""Process-pool map with a worker cap from the GEARCALIB_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_cap(n_items: int, requested: int | None = None) -> int:
    if requested is not None:
        cap = requested
    else:
        env = os.environ.get("GEARCALIB_THREADS")
        cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_items))


def pmap(fn: Callable[[T], R], items: Sequence[T], workers: int | None = None) -> list[R]:
    """Order-preserving map, forking processes only when it can actually help."""
    n = worker_cap(len(items), workers)
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
