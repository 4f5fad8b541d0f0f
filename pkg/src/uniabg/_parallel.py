"""Row-chunked parallel map whose results do not depend on the worker count.

Work is always split into the same fixed-size chunks; ``UNIABG_THREADS`` only
decides how many chunks run at once.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

CHUNK_ROWS = 256


def worker_count() -> int:
    raw = os.environ.get("UNIABG_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def map_row_chunks(fn: Callable[[int, int], T], n_rows: int, chunk: int = CHUNK_ROWS) -> list[T]:
    """Apply ``fn(start, stop)`` to consecutive row ranges, results in order."""
    bounds = [(s, min(s + chunk, n_rows)) for s in range(0, n_rows, chunk)]
    workers = min(worker_count(), len(bounds))
    if workers <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
