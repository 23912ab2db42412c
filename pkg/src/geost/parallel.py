from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: int) -> int:
    """0 means one worker per logical core."""
    return threads if threads > 0 else (os.cpu_count() or 1)


def thread_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Order-preserving map; work items must be independent."""
    items = list(items)
    threads = resolve_threads(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
