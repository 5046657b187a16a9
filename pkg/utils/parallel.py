# utils/parallel.py
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

# ---- Config ----
DEFAULT_THREADS = 1


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int = DEFAULT_THREADS) -> List[R]:
    """Map fn over items, returning results in input order whatever the thread count."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(fn, items))


__all__ = ["map_ordered", "DEFAULT_THREADS"]
