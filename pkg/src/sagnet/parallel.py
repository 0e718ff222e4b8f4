"""Thread-pool helpers. Results are always ordered, so outputs never depend
on the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(requested: int | None) -> int:
    """SAGNET_THREADS env var wins over the flag; default is the core count."""
    env = os.environ.get("SAGNET_THREADS")
    if env:
        return max(1, int(env))
    if requested:
        return max(1, requested)
    return os.cpu_count() or 1


def thread_map(fn, items, threads: int | None = None):
    """Order-preserving parallel map."""
    threads = resolve_threads(threads)
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
