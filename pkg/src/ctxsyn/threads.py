"""Worker-thread plumbing. CTXSYN_THREADS caps the pool size.

Work is always split into fixed chunks and merged in chunk order, so results
are bit-identical no matter how many workers actually run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


_CPU_COUNT = max(1, os.cpu_count() or 1)


def worker_count() -> int:
    env = os.environ.get("CTXSYN_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"CTXSYN_THREADS must be an integer, got {env!r}")
        return max(1, n)
    return _CPU_COUNT


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Apply ``fn`` to every item, results in input order.

    ``fn`` must be pure per item; assignment of items to threads then cannot
    change the output. Items are handed out in contiguous chunks (one per
    worker) to keep scheduling overhead off short tasks.
    """
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(item) for item in items]
    bounds = [len(items) * i // n for i in range(n + 1)]
    chunks = [items[bounds[i]:bounds[i + 1]] for i in range(n)]

    def run(chunk: Sequence[T]) -> List[R]:
        return [fn(item) for item in chunk]

    out: List[R] = []
    with ThreadPoolExecutor(max_workers=n) as pool:
        for part in pool.map(run, chunks):
            out.extend(part)
    return out
