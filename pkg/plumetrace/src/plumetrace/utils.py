import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is not None and threads > 0:
        return threads
    return os.cpu_count() or 1


def parallel_map(
    fn: Callable[[T], R], items: Iterable[T], threads: int = 1
) -> List[R]:
    """Maps in a thread pool, returning results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))
