"""Optional fan-out for per-image work, capped by SSOD_MATCH_THREADS.

Results always come back in input order, so enabling threads can never
change any output.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "SSOD_MATCH_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Ordered map over items, threaded when SSOD_MATCH_THREADS > 1."""
    seq: Sequence[T] = list(items)
    n = worker_count()
    if n == 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seq))
